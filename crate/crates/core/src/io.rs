//! Grid files and CSV exports.
//!
//! Grid file layout: the six bytes `TFRMT1`, the header length as a
//! little-endian u64, the JSON header, then the payload as little-endian f64.
//! Complex payloads interleave real and imaginary parts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::timefront::{IntensityGrid, KGrid, SourceSpec, TimefrontGrid};
use crate::unitary::{BlockInfo, Provenance, UnitaryPropagator};
use crate::C64;

pub const MAGIC: &[u8; 6] = b"TFRMT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    /// What the payload holds, e.g. `timefront`, `intensity`, `unitary`.
    pub kind: String,
    /// Row-major shape; the last index varies fastest.
    pub shape: Vec<usize>,
    pub complex: bool,
    /// Named coordinate axes.
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<f64>>,
    /// Free-form metadata: source, provenance, seeds, config hash.
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl GridHeader {
    pub fn new(kind: &str, shape: Vec<usize>, complex: bool) -> Self {
        GridHeader {
            kind: kind.to_string(),
            shape,
            complex,
            axes: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn payload_len(&self) -> usize {
        self.shape.iter().product::<usize>() * if self.complex { 2 } else { 1 }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("header lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn axis(&self, name: &str) -> Result<Vec<f64>> {
        self.axes
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("header lacks axis `{name}`")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} grid, found {}", self.kind)));
        }
        Ok(())
    }
}

pub fn encode(header: &GridHeader, payload: &[f64]) -> Result<Vec<u8>> {
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload has {} values, header shape needs {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(GridHeader, Vec<f64>)> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing TFRMT1 magic".into()))?;
    if rest.len() < 8 {
        return Err(Error::Format("truncated header length".into()));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(Error::Format("truncated header".into()));
    }
    let (json, body) = rest.split_at(len);
    let header: GridHeader = serde_json::from_slice(json)?;
    if body.len() != 8 * header.payload_len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header shape needs {}",
            body.len(),
            8 * header.payload_len()
        )));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

/// Writes through a sibling temporary file so a failed run leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let res = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_grid(path: &Path, header: &GridHeader, payload: &[f64]) -> Result<()> {
    write_atomic(path, &encode(header, payload)?)
}

pub fn read_grid(path: &Path) -> Result<(GridHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn interleave(values: &[C64]) -> Vec<f64> {
    values.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn deinterleave(values: &[f64]) -> Vec<C64> {
    values.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect()
}

pub fn timefront_to_grid(tf: &TimefrontGrid) -> Result<(GridHeader, Vec<f64>)> {
    let mut h = GridHeader::new("timefront", vec![tf.depths.len(), tf.times.len()], true)
        .with_meta("range_km", tf.r)?
        .with_meta("k_grid", tf.k_grid)?
        .with_meta("source", tf.source)?;
    h.axes.insert("depth_km".into(), tf.depths.clone());
    h.axes.insert("reduced_time_s".into(), tf.times.clone());
    Ok((h, interleave(&tf.phi)))
}

pub fn timefront_from_grid(h: &GridHeader, payload: &[f64]) -> Result<TimefrontGrid> {
    h.expect_kind("timefront")?;
    Ok(TimefrontGrid {
        depths: h.axis("depth_km")?,
        times: h.axis("reduced_time_s")?,
        phi: deinterleave(payload),
        r: h.meta_as("range_km")?,
        k_grid: h.meta_as::<KGrid>("k_grid")?,
        source: h.meta_as::<SourceSpec>("source")?,
    })
}

pub fn intensity_to_grid(g: &IntensityGrid) -> Result<(GridHeader, Vec<f64>)> {
    let mut h = GridHeader::new("intensity", vec![g.depths.len(), g.times.len()], false)
        .with_meta("members", g.members)?;
    h.axes.insert("depth_km".into(), g.depths.clone());
    h.axes.insert("reduced_time_s".into(), g.times.clone());
    Ok((h, g.values.clone()))
}

pub fn intensity_from_grid(h: &GridHeader, payload: &[f64]) -> Result<IntensityGrid> {
    h.expect_kind("intensity")?;
    Ok(IntensityGrid {
        depths: h.axis("depth_km")?,
        times: h.axis("reduced_time_s")?,
        values: payload.to_vec(),
        members: h.meta_as("members")?,
    })
}

/// Stores `U` row-major.
pub fn unitary_to_grid(u: &UnitaryPropagator) -> Result<(GridHeader, Vec<f64>)> {
    let m = u.mode_count();
    let h = GridHeader::new("unitary", vec![m, m], true)
        .with_meta("range_km", u.r)?
        .with_meta("k", u.k)?
        .with_meta("provenance", u.provenance)?
        .with_meta("blocks", u.blocks)?
        .with_meta("seeds", &u.seeds)?;
    let rows: Vec<C64> = (0..m).flat_map(|r| (0..m).map(move |c| (r, c))).map(|ix| u.u[ix]).collect();
    Ok((h, interleave(&rows)))
}

pub fn unitary_from_grid(h: &GridHeader, payload: &[f64]) -> Result<UnitaryPropagator> {
    h.expect_kind("unitary")?;
    let m = h.shape[0];
    let vals = deinterleave(payload);
    Ok(UnitaryPropagator {
        u: DMatrix::from_row_slice(m, m, &vals),
        r: h.meta_as("range_km")?,
        k: h.meta_as("k")?,
        provenance: h.meta_as::<Provenance>("provenance")?,
        blocks: h.meta_as::<Option<BlockInfo>>("blocks")?,
        seeds: h.meta_as("seeds")?,
    })
}

/// `10 log10(I / max I)` floored at `floor_db`.
pub fn to_db(values: &[f64], floor_db: f64) -> Vec<f64> {
    let peak = values.iter().cloned().fold(0.0f64, f64::max);
    values
        .iter()
        .map(|v| {
            if peak > 0.0 && *v > 0.0 {
                (10.0 * (v / peak).log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect()
}

/// dB matrix for plotting: first row holds the times, first column the depths.
pub fn db_csv(g: &IntensityGrid, floor_db: f64) -> Result<Vec<u8>> {
    let db = to_db(&g.values, floor_db);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["depth_km\\tau_s".to_string()];
    head.extend(g.times.iter().map(|t| format!("{t:.9e}")));
    w.write_record(&head).map_err(csv_err)?;
    for (iz, z) in g.depths.iter().enumerate() {
        let mut row = vec![format!("{z:.6}")];
        row.extend(db[iz * g.times.len()..(iz + 1) * g.times.len()].iter().map(|v| format!("{v:.4}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"NOPE").is_err());
        let h = GridHeader::new("intensity", vec![2, 2], false);
        let mut bytes = encode(&h, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(encode(&h, &[1.0]).is_err());
    }

    #[test]
    fn unitary_round_trip() {
        let u = UnitaryPropagator {
            u: DMatrix::from_fn(3, 3, |r, c| C64::new(r as f64, c as f64 - 0.5)),
            r: 50.0,
            k: 316.0,
            provenance: Provenance::Rmt,
            blocks: Some(BlockInfo { block_range: 50.0, blocks: 1 }),
            seeds: vec![1, 2],
        };
        let (h, p) = unitary_to_grid(&u).unwrap();
        let (h2, p2) = decode(&encode(&h, &p).unwrap()).unwrap();
        assert_eq!(unitary_from_grid(&h2, &p2).unwrap(), u);
    }

    #[test]
    fn file_round_trip_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.tfg");
        let g = IntensityGrid {
            depths: vec![0.5, 1.0],
            times: vec![-0.1, 0.0, 0.1],
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0],
            members: 7,
        };
        let (h, p) = intensity_to_grid(&g).unwrap();
        write_grid(&path, &h, &p).unwrap();
        let (h2, p2) = read_grid(&path).unwrap();
        assert_eq!(intensity_from_grid(&h2, &p2).unwrap(), g);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn db_scale() {
        let db = to_db(&[10.0, 1.0, 0.0], -60.0);
        assert_eq!(db, vec![0.0, -10.0, -60.0]);
    }

    proptest! {
        #[test]
        fn timefront_round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u64>(), 12),
            r in 0.1f64..2000.0,
        ) {
            let phi: Vec<C64> = bits.chunks(2).map(|p| C64::new(f64::from_bits(p[0]), f64::from_bits(p[1]))).collect();
            let tf = TimefrontGrid {
                depths: vec![0.0, 0.5, 1.0],
                times: vec![-1.0, 1.0],
                phi,
                r,
                k_grid: KGrid { k0: 316.0, sigma_k: 79.0, count: 128, half_width: 4.0 },
                source: SourceSpec::default(),
            };
            let (h, p) = timefront_to_grid(&tf).unwrap();
            let bytes = encode(&h, &p).unwrap();
            let (h2, p2) = decode(&bytes).unwrap();
            let back = timefront_from_grid(&h2, &p2).unwrap();
            prop_assert_eq!(back.r.to_bits(), r.to_bits());
            for (a, b) in back.phi.iter().zip(&tf.phi) {
                prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
                prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
            prop_assert_eq!(encode(&h2, &p2).unwrap(), bytes);
        }
    }
}
