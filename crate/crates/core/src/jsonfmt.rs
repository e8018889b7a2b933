//! JSON emission with fixed-width float formatting.
//!
//! Every f64 is written as scientific notation with 17 significant digits,
//! enough to round-trip any finite double exactly, and the writer is fully
//! deterministic so identical data yields byte-identical files.

use crate::error::{Error, Result};
use serde::Serialize;
use std::io::{self, Write};

struct SigFigFormatter {
    indent: usize,
}

impl SigFigFormatter {
    fn newline<W: ?Sized + Write>(&self, writer: &mut W) -> io::Result<()> {
        writer.write_all(b"\n")?;
        for _ in 0..self.indent {
            writer.write_all(b"  ")?;
        }
        Ok(())
    }
}

impl serde_json::ser::Formatter for SigFigFormatter {
    // Non-finite floats never reach this: serde_json writes them as null
    // before consulting the formatter, and every producer in this crate
    // validates finiteness first.
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.indent += 1;
        writer.write_all(b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.indent -= 1;
        writer.write_all(b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if !first {
            writer.write_all(b", ")?;
        }
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.indent += 1;
        writer.write_all(b"{")
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.indent -= 1;
        self.newline(writer)?;
        writer.write_all(b"}")
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if !first {
            writer.write_all(b",")?;
        }
        self.newline(writer)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        writer.write_all(b": ")
    }
}

/// Serializes `value` as JSON text with 17-significant-digit floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFigFormatter { indent: 0 });
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| Error::Parse(format!("invalid utf8 in JSON output: {e}")))
}

/// Formats one float the same way the JSON writer does.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let values = vec![0.5, 1.0 / 3.0, -2.375e-13, 29.875, std::f64::consts::PI];
        let text = to_json_string(&values).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(values, back);
        for v in &values {
            // 17 significant digits: one before the point, 16 after
            assert!(text.contains(&format!("{v:.16e}")));
        }
    }

    #[test]
    fn output_is_deterministic() {
        #[derive(serde::Serialize)]
        struct S {
            a: f64,
            b: Vec<u32>,
        }
        let s = S { a: 0.1, b: vec![1, 2, 3] };
        assert_eq!(to_json_string(&s).unwrap(), to_json_string(&s).unwrap());
    }

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(to_json_string(&f64::INFINITY).unwrap().trim(), "null");
    }
}
