//! Portable text serialization for named parameter arrays.
//!
//! Layout: one free-form header line, then per array a line
//! `array <name> <rank> <dim0> <dim1> ...` followed by the row-major values,
//! eight per line, printed with 17 significant digits so f64 round-trips
//! value-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn serialize(header: &str, arrays: &[(String, &Tensor)]) -> String {
    let mut out = String::new();
    assert!(!header.contains('\n'), "header must be a single line");
    out.push_str(header);
    out.push('\n');
    for (name, t) in arrays {
        assert!(!name.contains(char::is_whitespace), "array name must not contain whitespace");
        write!(out, "array {} {}", name, t.shape().len()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        for chunk in t.data().chunks(8) {
            let line: Vec<String> = chunk.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn deserialize(text: &str) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty file".into()))?
        .to_string();
    let mut arrays = Vec::new();
    let mut rest: Vec<&str> = lines.collect();
    rest.reverse(); // pop from the front

    while let Some(line) = rest.pop() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("array") => {}
            other => return Err(Error::Parse(format!("expected 'array', got {other:?}"))),
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse("array line missing name".into()))?
            .to_string();
        let rank: usize = parse_num(parts.next(), "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(parse_num(parts.next(), &format!("dim {i}"))?);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        while data.len() < count {
            let line = rest
                .pop()
                .ok_or_else(|| Error::Parse(format!("array {name}: unexpected end of data")))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("array {name}: bad value {tok:?}")))?;
                data.push(v);
            }
        }
        if data.len() != count {
            return Err(Error::Parse(format!(
                "array {name}: expected {count} values, got {}",
                data.len()
            )));
        }
        arrays.push((name, Tensor::new(shape, data)));
    }
    Ok((header, arrays))
}

fn parse_num(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what}")))
}

pub fn save(path: &Path, header: &str, arrays: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, serialize(header, arrays))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let text = fs::read_to_string(path)?;
    deserialize(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn roundtrip_is_value_exact() {
        let mut r = rng::stream_from(9);
        let a = Tensor::randn(&[3, 5], &mut r);
        let b = Tensor::randn(&[7], &mut r).scale(1e-13);
        let text = serialize("hdr v1 x=2", &[("a".into(), &a), ("b".into(), &b)]);
        let (hdr, arrays) = deserialize(&text).unwrap();
        assert_eq!(hdr, "hdr v1 x=2");
        assert_eq!(arrays[0].1, a);
        assert_eq!(arrays[1].1, b);
    }

    #[test]
    fn malformed_input_is_an_error() {
        assert!(deserialize("hdr\nnot-an-array 1 2\n").is_err());
        assert!(deserialize("hdr\narray a 1 4\n1.0 2.0\n").is_err());
    }
}
