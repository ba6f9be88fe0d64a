//! On-disk formats: the binary image dataset, text feature files, and
//! verification pair lists.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, SeidError};
use crate::tensor::Tensor;
use crate::train::SyntheticDataset;

const MAGIC: &[u8; 8] = b"SEIDDATA";

/// Header: magic, then u64 LE count / channels / height / width / classes;
/// body: count u64 labels, then count*C*H*W f64 LE pixels.
pub fn write_dataset(path: &Path, dataset: &SyntheticDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = dataset.images.shape.dims();
    w.write_all(MAGIC)?;
    for v in [d[0], d[1], d[2], d[3], dataset.num_classes] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for &label in &dataset.labels {
        w.write_all(&(label as u64).to_le_bytes())?;
    }
    for &px in &dataset.images.data {
        w.write_all(&px.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_dataset(path: &Path) -> Result<SyntheticDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SeidError::Parse(format!(
            "{}: not a dataset file (bad magic)",
            path.display()
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let c = read_u64(&mut r)? as usize;
    let h = read_u64(&mut r)? as usize;
    let w = read_u64(&mut r)? as usize;
    let num_classes = read_u64(&mut r)? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = read_u64(&mut r)? as usize;
        if label >= num_classes {
            return Err(SeidError::Parse(format!(
                "{}: label {label} out of range {num_classes}",
                path.display()
            )));
        }
        labels.push(label);
    }
    let n = count * c * h * w;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let images = Tensor::from_dims(&[count, c, h, w], data)?;
    Ok(SyntheticDataset {
        images,
        labels,
        num_classes,
    })
}

/// One line per image: `id<TAB>v1 v2 ... vD`.
pub fn write_features(path: &Path, features: &IndexMap<String, Vec<f64>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, vec) in features {
        let vals: Vec<String> = vec.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{id}\t{}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<IndexMap<String, Vec<f64>>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = IndexMap::new();
    let mut width = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| {
            SeidError::Parse(format!(
                "{}:{}: expected `id<TAB>floats`",
                path.display(),
                lineno + 1
            ))
        })?;
        let vec: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    SeidError::Parse(format!(
                        "{}:{}: bad float '{t}'",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(w) = width {
            if vec.len() != w {
                return Err(SeidError::Parse(format!(
                    "{}:{}: width {} differs from {}",
                    path.display(),
                    lineno + 1,
                    vec.len(),
                    w
                )));
            }
        } else {
            width = Some(vec.len());
        }
        if out.insert(id.to_string(), vec).is_some() {
            return Err(SeidError::Parse(format!(
                "{}:{}: duplicate id '{id}'",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(out)
}

/// One pair per line: `id_a  id_b  same(0/1)`; `#` comments allowed.
pub fn write_pairs(path: &Path, pairs: &[(String, String, bool)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, b, same) in pairs {
        writeln!(w, "{a}\t{b}\t{}", u8::from(*same))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String, bool)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(SeidError::Parse(format!(
                "{}:{}: expected `id_a id_b same`",
                path.display(),
                lineno + 1
            )));
        }
        let same = match parts[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(SeidError::Parse(format!(
                    "{}:{}: same flag must be 0 or 1, got '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        out.push((parts[0].to_string(), parts[1].to_string(), same));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::generate_synthetic_faces;
    use tempfile::tempdir;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.seid");
        let ds = generate_synthetic_faces(4, 3, 16, 0.1, true, 7);
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, 4);
        assert_eq!(back.images.shape, ds.images.shape);
        for (a, b) in back.images.data.iter().zip(&ds.images.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.seid");
        std::fs::write(&path, b"NOTADATA").unwrap();
        assert!(read_dataset(&path).is_err());

        let good = dir.path().join("trunc.seid");
        let ds = generate_synthetic_faces(2, 2, 8, 0.0, false, 1);
        write_dataset(&good, &ds).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_dataset(&good).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.tsv");
        let mut feats = IndexMap::new();
        feats.insert("c0_i0".to_string(), vec![1.0, -0.5, 1e-12]);
        feats.insert("c1_i0".to_string(), vec![0.25, 3.0, std::f64::consts::PI]);
        write_features(&path, &feats).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, feats);
    }

    #[test]
    fn feature_file_rejects_duplicates_and_ragged_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.tsv");
        std::fs::write(&path, "a\t1.0 2.0\na\t3.0 4.0\n").unwrap();
        assert!(read_features(&path).is_err());
        std::fs::write(&path, "a\t1.0 2.0\nb\t3.0\n").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn pair_list_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pairs.txt");
        let pairs = vec![
            ("a".to_string(), "b".to_string(), true),
            ("a".to_string(), "c".to_string(), false),
        ];
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
        std::fs::write(&path, "# comment\na b 2\n").unwrap();
        assert!(read_pairs(&path).is_err());
    }
}
