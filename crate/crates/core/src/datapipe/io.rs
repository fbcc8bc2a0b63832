//! On-disk dataset layout, one directory per case:
//!
//! ```text
//! <root>/<case_id>/meta.json    {"case_id", "modality", "shape": [C,H,W],
//!                                "n_raters", "crop"?: {top,left,height,width}}
//! <root>/<case_id>/image.f32    C-order little-endian float32, C*H*W values
//! <root>/<case_id>/rater_XX.u8  one byte per pixel, values 0/1, H*W bytes
//! ```
//!
//! Predictions use the same sidecar pattern: `pred.f32` (H*W little-endian
//! float32) next to a `meta.json` with `{"case_id", "shape": [H,W],
//! "provenance"}`. All multi-byte values are little-endian; this layout is
//! the cross-language contract.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{CaseRecord, CropRecord, Modality};
use crate::metrics::{Provenance, SoftMap};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CaseMeta {
    case_id: String,
    modality: Modality,
    shape: [usize; 3],
    n_raters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop: Option<CropRecord>,
}

#[derive(Serialize, Deserialize)]
struct PredMeta {
    case_id: String,
    shape: [usize; 2],
    provenance: Provenance,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() != expect * 4 {
        return Err(Error::Numeric(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 4,
            raw.len()
        )));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one case directory under `root`.
pub fn save_case(root: &Path, case: &CaseRecord) -> Result<()> {
    case.validate()?;
    let dir = root.join(&case.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (c, h, w) = case.image.dim();
    write_json(
        &dir.join("meta.json"),
        &CaseMeta {
            case_id: case.case_id.clone(),
            modality: case.modality,
            shape: [c, h, w],
            n_raters: case.raters.len(),
            crop: case.crop,
        },
    )?;
    write_f32(&dir.join("image.f32"), case.image.iter().copied())?;
    for (i, mask) in case.raters.iter().enumerate() {
        let path = dir.join(format!("rater_{i:02}.u8"));
        let bytes: Vec<u8> = mask.iter().copied().collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads one case directory.
pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let meta: CaseMeta = read_json(&dir.join("meta.json"))?;
    let [c, h, w] = meta.shape;
    let data = read_f32(&dir.join("image.f32"), c * h * w)?;
    let image = Array3::from_shape_vec((c, h, w), data).expect("length checked");
    let mut raters = Vec::with_capacity(meta.n_raters);
    for i in 0..meta.n_raters {
        let path = dir.join(format!("rater_{i:02}.u8"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != h * w {
            return Err(Error::Dataset {
                case_id: meta.case_id.clone(),
                message: format!(
                    "rater {i} mask has {} bytes, expected {}",
                    bytes.len(),
                    h * w
                ),
            });
        }
        raters.push(Array2::from_shape_vec((h, w), bytes).expect("length checked"));
    }
    let case = CaseRecord {
        case_id: meta.case_id,
        modality: meta.modality,
        image,
        raters,
        crop: meta.crop,
    };
    case.validate()?;
    Ok(case)
}

/// Writes every case under `root`, creating it if needed.
pub fn save_dataset(root: &Path, cases: &[CaseRecord]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for case in cases {
        save_case(root, case)?;
    }
    Ok(())
}

/// Loads every case directory under `root`, sorted by case id.
pub fn load_dataset(root: &Path) -> Result<Vec<CaseRecord>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no case directories with meta.json under {}",
            root.display()
        )));
    }
    let mut cases: Vec<CaseRecord> = dirs.iter().map(|d| load_case(d)).collect::<Result<_>>()?;
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

/// Writes `pred.f32` + `meta.json` into `dir`.
pub fn save_prediction(dir: &Path, case_id: &str, map: &SoftMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = map.shape();
    write_json(
        &dir.join("meta.json"),
        &PredMeta {
            case_id: case_id.to_string(),
            shape: [h, w],
            provenance: map.provenance,
        },
    )?;
    write_f32(&dir.join("pred.f32"), map.values.iter().copied())
}

/// Reads a prediction directory back into a soft map.
pub fn load_prediction(dir: &Path) -> Result<(String, SoftMap)> {
    let meta: PredMeta = read_json(&dir.join("meta.json"))?;
    let [h, w] = meta.shape;
    let data = read_f32(&dir.join("pred.f32"), h * w)?;
    let values = Array2::from_shape_vec((h, w), data).expect("length checked");
    Ok((meta.case_id, SoftMap::new(values, meta.provenance)?))
}
