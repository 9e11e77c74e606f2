//! CSV output with a fixed column order and 17-significant-digit floats, so
//! identical runs produce byte-identical files on any platform.

use std::io::{BufWriter, Write};
use std::path::Path;

pub struct CsvWriter {
    inner: BufWriter<std::fs::File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> anyhow::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut inner = BufWriter::new(std::fs::File::create(path)?);
        writeln!(inner, "{}", header.join(","))?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, fields: &[CsvField]) -> anyhow::Result<()> {
        let mut first = true;
        for f in fields {
            if !first {
                write!(self.inner, ",")?;
            }
            first = false;
            match f {
                CsvField::Int(v) => write!(self.inner, "{v}")?,
                CsvField::Float(v) => write!(self.inner, "{}", fmt_float(*v))?,
                CsvField::Str(s) => write!(self.inner, "{s}")?,
                CsvField::Empty => {}
            }
        }
        writeln!(self.inner)?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub enum CsvField {
    Int(i64),
    Float(f64),
    Str(String),
    Empty,
}

/// 17 significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_fixed_width_precision() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(-0.5), "-5.0000000000000000e-1");
        let x = 0.1 + 0.2;
        assert_eq!(fmt_float(x), "3.0000000000000004e-1");
    }
}
