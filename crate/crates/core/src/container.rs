//! On-disk formats for designs and observations.
//!
//! The binary container is little-endian: the magic bytes `TRCM`, a `u32`
//! version (1), `n` and `d` as `u64`, then `n · d · d` complex entries as
//! `(re, im)` f64 pairs in row-major order per matrix. An optional trailing
//! block of `n` f64 observations follows; readers detect it from the
//! remaining length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::trace_model::{DesignBatch, Observations};

pub const MAGIC: &[u8; 4] = b"TRCM";
pub const VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, design: &DesignBatch, obs: Option<&Observations>) -> Result<()> {
    let (n, d) = (design.n(), design.dim());
    if let Some(o) = obs {
        o.check_against(design)?;
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    for i in 0..n {
        for r in 0..d {
            for c in 0..d {
                let z = design.entry(i, r, c);
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
    }
    if let Some(o) = obs {
        for y in &o.values {
            w.write_all(&y.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(DesignBatch, Option<Observations>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a design container (bad magic)".into()));
    }
    let word = |at: usize| -> [u8; 8] { bytes[at..at + 8].try_into().expect("8 bytes") };
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let n = u64::from_le_bytes(word(8)) as usize;
    let d = u64::from_le_bytes(word(16)) as usize;
    let body = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(16))
        .ok_or_else(|| Error::Format("container dimensions overflow".into()))?;
    let rest = bytes.len() - 24;
    let has_obs = if rest == body {
        false
    } else if rest == body + 8 * n {
        true
    } else {
        return Err(Error::Format(format!(
            "container payload is {rest} bytes, expected {body} or {}",
            body + 8 * n
        )));
    };
    let f = |at: usize| f64::from_le_bytes(word(at));
    let entries: Vec<C64> = (0..n * d * d)
        .map(|k| C64::new(f(24 + 16 * k), f(24 + 16 * k + 8)))
        .collect();
    let design = DesignBatch::from_complex_entries(n, d, entries)?;
    let obs = if has_obs {
        Some(Observations::new((0..n).map(|i| f(24 + body + 8 * i)).collect())?)
    } else {
        None
    };
    Ok((design, obs))
}

pub fn save_container(path: &Path, design: &DesignBatch, obs: Option<&Observations>) -> Result<()> {
    write_container(BufWriter::new(File::create(path)?), design, obs)
}

pub fn load_container(path: &Path) -> Result<(DesignBatch, Option<Observations>)> {
    read_container(BufReader::new(File::open(path)?))
}

/// Writes every design entry as a `sample,row,col,re,im` row.
pub fn write_design_csv<W: Write>(w: W, design: &DesignBatch) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample", "row", "col", "re", "im"])?;
    let d = design.dim();
    for i in 0..design.n() {
        for r in 0..d {
            for c in 0..d {
                let z = design.entry(i, r, c);
                out.write_record([i.to_string(), r.to_string(), c.to_string(), z.re.to_string(), z.im.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a design CSV. Entries that are not listed are zero; `n` and `d` are
/// taken from the largest indices present.
pub fn read_design_csv<R: Read>(r: R) -> Result<DesignBatch> {
    let mut rows = Vec::new();
    let (mut n, mut d) = (0usize, 0usize);
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| Error::Format(format!("design row has {} fields", rec.len())));
        let idx = |k: usize| -> Result<usize> {
            field(k)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad index '{}'", rec.get(k).unwrap_or(""))))
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number '{}'", rec.get(k).unwrap_or(""))))
        };
        let (i, a, b) = (idx(0)?, idx(1)?, idx(2)?);
        n = n.max(i + 1);
        d = d.max(a + 1).max(b + 1);
        rows.push((i, a, b, C64::new(num(3)?, num(4)?)));
    }
    if n == 0 {
        return Err(Error::Format("design CSV has no entries".into()));
    }
    let mut entries = vec![C64::new(0.0, 0.0); n * d * d];
    for (i, a, b, z) in rows {
        entries[i * d * d + a * d + b] = z;
    }
    DesignBatch::from_complex_entries(n, d, entries)
}

/// Writes `sample,y,noise`; the noise column is empty when unknown.
pub fn write_observations_csv<W: Write>(w: W, obs: &Observations) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample", "y", "noise"])?;
    for (i, y) in obs.values.iter().enumerate() {
        let noise = obs.noise.as_ref().map(|e| e[i].to_string()).unwrap_or_default();
        out.write_record([i.to_string(), y.to_string(), noise])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations_csv<R: Read>(r: R) -> Result<Observations> {
    let mut values = Vec::new();
    let mut noise = Vec::new();
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number '{s}'")));
        let y = rec.get(1).ok_or_else(|| Error::Format("observation row lacks y".into()))?;
        values.push(parse(y)?);
        match rec.get(2).map(str::trim) {
            Some(s) if !s.is_empty() => noise.push(parse(s)?),
            _ => {}
        }
    }
    let mut obs = Observations::new(values)?;
    if !noise.is_empty() {
        if noise.len() != obs.n() {
            return Err(Error::Format("noise column is only partially filled".into()));
        }
        obs.noise = Some(noise);
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::MatrixValue;
    use crate::trace_model::{gen_gaussian_design, gen_low_rank_theta, simulate_observations};

    #[test]
    fn container_round_trip_and_layout() {
        let m = MatrixValue::new(2, 2, vec![
            C64::new(1.0, 0.0),
            C64::new(2.0, -1.0),
            C64::new(2.0, 1.0),
            C64::new(-3.0, 0.0),
        ])
        .unwrap();
        let design = DesignBatch::from_matrices(&[m.clone(), m.scale(0.5)]).unwrap();
        let obs = Observations::new(vec![0.25, -8.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &design, Some(&obs)).unwrap();
        assert_eq!(buf.len(), 24 + 2 * 4 * 16 + 2 * 8);
        assert_eq!(&buf[..4], b"TRCM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        // entry (0,1) of matrix 0: imaginary part at byte 24 + 16 + 8
        assert_eq!(f64::from_le_bytes(buf[48..56].try_into().unwrap()), -1.0);
        let (d2, o2) = read_container(buf.as_slice()).unwrap();
        assert_eq!(d2, design);
        assert_eq!(o2.unwrap().values, obs.values);

        let mut buf = Vec::new();
        write_container(&mut buf, &design, None).unwrap();
        let (_, none) = read_container(buf.as_slice()).unwrap();
        assert!(none.is_none());
        buf.pop();
        assert!(read_container(buf.as_slice()).is_err());
        assert!(read_container(&b"NOPE0000000000000000000000"[..]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let design = gen_gaussian_design(4, 3, 1).unwrap();
        let obs = simulate_observations(&design, &gen_low_rank_theta(3, 1, 2).unwrap(), 1.0, 3).unwrap();
        let mut buf = Vec::new();
        write_design_csv(&mut buf, &design).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("sample,row,col,re,im\n"));
        let back = read_design_csv(buf.as_slice()).unwrap();
        assert_eq!(back, design);

        let mut buf = Vec::new();
        write_observations_csv(&mut buf, &obs).unwrap();
        let back = read_observations_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values, obs.values);
        assert_eq!(back.noise, obs.noise);
    }
}
