//! On-disk formats, all little-endian:
//!
//! - `TFDS` dataset container: features stored as f32 records.
//! - `TFMD` model checkpoint: f64 layer values, optional softmax head, plus
//!   a JSON metadata sidecar at `<path>.json`.
//! - `TFIX` retrieval index: centroid block followed by a members block.
//! - a plain-text CSV feature importer (`sample_id,identity,f0,...`).

use crate::dataset::{LabeledDataset, Sample};
use crate::embedding::IdentityCentroid;
use crate::error::{Error, Result};
use crate::model::{Layer, Matrix, ModelParams, SoftmaxHead};
use crate::retrieval::RetrievalIndex;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TFDS_MAGIC: &[u8; 4] = b"TFDS";
const TFMD_MAGIC: &[u8; 4] = b"TFMD";
const TFIX_MAGIC: &[u8; 4] = b"TFIX";
const FORMAT_VERSION: u32 = 1;

fn check_magic(r: &mut impl Read, want: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != want {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, want
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- dataset

pub fn write_tfds(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TFDS_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(dataset.samples.len() as u64)?;
    w.write_u64::<LittleEndian>(dataset.num_identities as u64)?;
    w.write_u32::<LittleEndian>(dataset.d_in as u32)?;
    for s in &dataset.samples {
        w.write_u64::<LittleEndian>(s.sample_id)?;
        w.write_u32::<LittleEndian>(s.identity)?;
        for &f in &s.features {
            w.write_f32::<LittleEndian>(f as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tfds(path: &Path) -> Result<LabeledDataset> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, TFDS_MAGIC)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let c = r.read_u64::<LittleEndian>()?;
    let d_in = r.read_u32::<LittleEndian>()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let sample_id = r.read_u64::<LittleEndian>()?;
        let identity = r.read_u32::<LittleEndian>()?;
        let mut features = Vec::with_capacity(d_in);
        for _ in 0..d_in {
            features.push(r.read_f32::<LittleEndian>()? as f64);
        }
        samples.push(Sample {
            sample_id,
            identity,
            features,
        });
    }
    LabeledDataset::new(samples, c as u32, d_in)
}

/// Imports `sample_id,identity,f0,...,f{d−1}` rows (header required);
/// the identity count is the max label + 1.
pub fn read_features_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.len() < 3 || &headers[0] != "sample_id" || &headers[1] != "identity" {
        return Err(Error::Format(
            "CSV header must start with sample_id,identity,f0,...".into(),
        ));
    }
    let d_in = headers.len() - 2;
    let mut samples = Vec::new();
    let mut max_identity = 0u32;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != d_in + 2 {
            return Err(Error::Format(format!(
                "row has {} fields, expected {}",
                record.len(),
                d_in + 2
            )));
        }
        let sample_id: u64 = record[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad sample_id {:?}", &record[0])))?;
        let identity: u32 = record[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad identity {:?}", &record[1])))?;
        max_identity = max_identity.max(identity);
        let features = (2..record.len())
            .map(|i| {
                record[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad feature {:?}", &record[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            sample_id,
            identity,
            features,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    LabeledDataset::new(samples, max_identity + 1, d_in)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

// ------------------------------------------------------------- checkpoint

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub stage: String,
    pub epoch: usize,
    pub config: serde_json::Value,
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_u32::<LittleEndian>(m.rows as u32)?;
    w.write_u32::<LittleEndian>(m.cols as u32)?;
    for &v in &m.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Matrix { rows, cols, data })
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(v.len() as u32)?;
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(v)
}

pub fn write_checkpoint(
    path: &Path,
    model: &ModelParams,
    head: Option<&SoftmaxHead>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TFMD_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(model.d_in as u32)?;
    w.write_u32::<LittleEndian>(model.d_out as u32)?;
    w.write_u32::<LittleEndian>(model.layers.len() as u32)?;
    for layer in &model.layers {
        write_matrix(&mut w, &layer.weight)?;
        write_vec(&mut w, &layer.bias)?;
    }
    match head {
        Some(h) => {
            w.write_u8(1)?;
            write_matrix(&mut w, &h.weight)?;
            write_vec(&mut w, &h.bias)?;
        }
        None => w.write_u8(0)?,
    }
    w.flush()?;
    let sidecar = sidecar_path(path);
    std::fs::write(sidecar, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Option<SoftmaxHead>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, TFMD_MAGIC)?;
    let d_in = r.read_u32::<LittleEndian>()? as usize;
    let d_out = r.read_u32::<LittleEndian>()? as usize;
    let n_layers = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = read_matrix(&mut r)?;
        let bias = read_vec(&mut r)?;
        layers.push(Layer { weight, bias });
    }
    let model = ModelParams::from_layers(layers, d_in, d_out)?;
    let head = match r.read_u8()? {
        0 => None,
        1 => Some(SoftmaxHead {
            weight: read_matrix(&mut r)?,
            bias: read_vec(&mut r)?,
        }),
        other => return Err(Error::Format(format!("bad head flag {other}"))),
    };
    Ok((model, head))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

// ------------------------------------------------------------------ index

pub fn write_tfix(path: &Path, index: &RetrievalIndex) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TFIX_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let tag = index.model_tag.as_bytes();
    w.write_u32::<LittleEndian>(tag.len() as u32)?;
    w.write_all(tag)?;
    let dim = index.centroids()[0].centroid.len();
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(index.num_identities() as u64)?;
    for c in index.centroids() {
        w.write_u32::<LittleEndian>(c.identity)?;
        w.write_u64::<LittleEndian>(c.member_count as u64)?;
        for &v in &c.centroid {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    for group in index.members() {
        w.write_u64::<LittleEndian>(group.len() as u64)?;
        for (sample_id, vector) in group {
            w.write_u64::<LittleEndian>(*sample_id)?;
            for &v in vector {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tfix(path: &Path) -> Result<RetrievalIndex> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, TFIX_MAGIC)?;
    let tag_len = r.read_u32::<LittleEndian>()? as usize;
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag)?;
    let model_tag =
        String::from_utf8(tag).map_err(|_| Error::Format("index tag is not UTF-8".into()))?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u64::<LittleEndian>()? as usize;
    let mut centroids = Vec::with_capacity(c);
    for _ in 0..c {
        let identity = r.read_u32::<LittleEndian>()?;
        let member_count = r.read_u64::<LittleEndian>()? as usize;
        let mut centroid = Vec::with_capacity(dim);
        for _ in 0..dim {
            centroid.push(r.read_f64::<LittleEndian>()?);
        }
        centroids.push(IdentityCentroid {
            identity,
            centroid,
            member_count,
        });
    }
    let mut members = Vec::with_capacity(c);
    for _ in 0..c {
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            let sample_id = r.read_u64::<LittleEndian>()?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(r.read_f64::<LittleEndian>()?);
            }
            group.push((sample_id, vector));
        }
        members.push(group);
    }
    RetrievalIndex::from_parts(centroids, members, model_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as IoWrite;

    fn toy_dataset() -> LabeledDataset {
        let samples = (0..6)
            .map(|i| Sample {
                sample_id: i as u64 * 10,
                identity: (i % 3) as u32,
                features: vec![i as f64 * 0.5, -(i as f64), 1.25],
            })
            .collect();
        LabeledDataset::new(samples, 3, 3).unwrap()
    }

    #[test]
    fn tfds_roundtrip_preserves_f32_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tfds");
        let ds = toy_dataset();
        write_tfds(&path, &ds).unwrap();
        let back = read_tfds(&path).unwrap();
        assert_eq!(back.num_identities, 3);
        assert_eq!(back.d_in, 3);
        assert_eq!(back.samples.len(), 6);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.identity, b.identity);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn tfds_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tfds");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tfds(&path), Err(Error::Format(_))));
    }

    #[test]
    fn csv_import_matches_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.csv");
        std::fs::write(
            &path,
            "sample_id,identity,f0,f1\n0,0,1.5,-2.0\n1,1,0.25,0.75\n",
        )
        .unwrap();
        let ds = read_features_csv(&path).unwrap();
        assert_eq!(ds.d_in, 2);
        assert_eq!(ds.num_identities, 2);
        assert_eq!(ds.samples[0].features, vec![1.5, -2.0]);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,label,f0\n0,0,1.0\n").unwrap();
        assert!(matches!(read_features_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tfmd");
        let model = ModelParams::new_seeded(4, &[6], 3, 11).unwrap();
        let head = SoftmaxHead::new_seeded(5, 3, 12);
        let meta = CheckpointMeta {
            seed: 11,
            stage: "classifier".into(),
            epoch: 3,
            config: serde_json::json!({"d": 3}),
        };
        write_checkpoint(&path, &model, Some(&head), &meta).unwrap();
        let (m2, h2) = read_checkpoint(&path).unwrap();
        assert_eq!(m2.layers, model.layers);
        assert_eq!(h2.unwrap(), head);
        let meta2 = read_checkpoint_meta(&path).unwrap();
        assert_eq!(meta2.stage, "classifier");
        assert_eq!(meta2.epoch, 3);
    }

    #[test]
    fn tfix_roundtrip_is_exact() {
        let centroids = vec![
            IdentityCentroid {
                identity: 0,
                centroid: vec![0.25, -0.5],
                member_count: 2,
            },
            IdentityCentroid {
                identity: 2,
                centroid: vec![1.0, 0.0],
                member_count: 1,
            },
        ];
        let members = vec![
            vec![(0u64, vec![0.5, -1.0]), (1u64, vec![0.0, 0.0])],
            vec![(9u64, vec![1.0, 0.0])],
        ];
        let index = RetrievalIndex::from_parts(centroids, members, "tag".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.tfix");
        write_tfix(&path, &index).unwrap();
        let back = read_tfix(&path).unwrap();
        assert_eq!(back, index);
    }
}
