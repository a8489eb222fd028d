//! Feature container (`DFNF`) and normalization-stats CSV.
//!
//! `DFNF` layout, all little-endian: magic `b"DFNF"`, version `u32`, frame
//! count `u32`, dimension `u32`, then `frames * dim` row-major `f32`.

use std::fs;
use std::path::Path;

use super::{NormStats, PoseFeature};
use crate::error::{DfnError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DFNF";
const FEATURE_VERSION: u32 = 1;

pub fn encode_features(features: &[PoseFeature]) -> Result<Vec<u8>> {
    let dim = features.first().map(PoseFeature::dim).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + 4 * dim * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for f in features {
        if f.dim() != dim {
            return Err(DfnError::InvalidInput("features of mixed dimension".into()));
        }
        for v in &f.0 {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<PoseFeature>> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(DfnError::Format("not a DFNF feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(DfnError::Format(format!("unsupported DFNF version {version}")));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * frames * dim {
        return Err(DfnError::Format(format!(
            "DFNF payload holds {} bytes, header promises {frames}x{dim} floats",
            bytes.len() - 16
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if dim == 0 {
        return Ok(Vec::new());
    }
    Ok(values.chunks_exact(dim).map(|c| PoseFeature(c.to_vec())).collect())
}

pub fn write_features(path: &Path, features: &[PoseFeature]) -> Result<()> {
    let bytes = encode_features(features)?;
    fs::write(path, bytes).map_err(|e| DfnError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<PoseFeature>> {
    let bytes = fs::read(path).map_err(|e| DfnError::io(path, e))?;
    decode_features(&bytes).map_err(|e| DfnError::Format(format!("{}: {e}", path.display())))
}

/// Two CSV rows: means, then standard deviations.
pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(",");
    let text = format!("{}\n{}\n", row(&stats.mean), row(&stats.std));
    fs::write(path, text).map_err(|e| DfnError::io(path, e))
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path).map_err(|e| DfnError::io(path, e))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| DfnError::parse(i + 1, format!("invalid number '{t}'")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != 2 || rows[0].len() != rows[1].len() {
        return Err(DfnError::Format(format!(
            "{}: expected a 2-row stats table",
            path.display()
        )));
    }
    let clamped = rows[1].iter().map(|s| *s == 1.0).collect();
    let mut rows = rows.into_iter();
    Ok(NormStats {
        mean: rows.next().unwrap(),
        std: rows.next().unwrap(),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_features(&vec![PoseFeature(vec![1.5; 76]); 3]).unwrap();
        assert_eq!(&bytes[..4], b"DFNF");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 76);
        assert_eq!(bytes.len(), 16 + 3 * 76 * 4);
        assert_eq!(&bytes[16..20], &1.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = encode_features(&[PoseFeature(vec![0.0; 76])]).unwrap();
        bytes.pop();
        assert!(decode_features(&bytes).is_err());
        assert!(decode_features(b"XXXX").is_err());
    }

    #[test]
    fn stats_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        let stats = NormStats {
            mean: vec![0.1, -3.0, 7.25],
            std: vec![1.0, 0.3, 2.0],
            clamped: vec![true, false, false],
        };
        write_norm_stats(&path, &stats).unwrap();
        assert_eq!(read_norm_stats(&path).unwrap(), stats);
    }

    proptest! {
        #[test]
        fn f32_values_survive(values in proptest::collection::vec(-1e4f32..1e4, 76 * 2)) {
            let feats: Vec<PoseFeature> = values
                .chunks(76)
                .map(|c| PoseFeature(c.iter().map(|v| *v as f64).collect()))
                .collect();
            let back = decode_features(&encode_features(&feats).unwrap()).unwrap();
            prop_assert_eq!(back, feats);
        }
    }
}
