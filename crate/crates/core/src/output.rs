//! CSV writing shared by all exporters: RFC 4180 quoting, '.' decimal
//! separator, 17 significant digits.

use std::io::{self, Write};

/// Formats a float with 17 significant digits so it parses back exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn write_csv_header<W: Write, S: AsRef<str>>(w: &mut W, fields: &[S]) -> io::Result<()> {
    let line: Vec<String> = fields.iter().map(|f| quote(f.as_ref())).collect();
    write!(w, "{}\r\n", line.join(","))
}

/// One data row, optionally led by a text label.
pub fn write_csv_row<W: Write>(w: &mut W, label: Option<&str>, values: &[f64]) -> io::Result<()> {
    let mut line: Vec<String> = Vec::with_capacity(values.len() + 1);
    if let Some(l) = label {
        line.push(quote(l));
    }
    line.extend(values.iter().map(|&v| fmt_f64(v)));
    write!(w, "{}\r\n", line.join(","))
}

/// Mixed text row.
pub fn write_csv_fields<W: Write, S: AsRef<str>>(w: &mut W, fields: &[S]) -> io::Result<()> {
    write_csv_header(w, fields)
}
