//! On-disk dataset layout: `manifest.json` plus one little-endian float64
//! blob per sample under `samples/`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::splits::{ClassSplit, Dataset, SplitCounts, SplitPlan, SplitTag};
use super::{Observation, WorldSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    file: String,
    subject: usize,
    context: usize,
    label: u8,
    split: SplitTag,
    instance_seed: u64,
    /// One string per grid row, '1' on subject cells.
    mask: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dataset_hash: String,
    contextual: bool,
    world: WorldSpec,
    split_plan: SplitPlan,
    counts: SplitCounts,
    assignments: Vec<ClassSplit>,
    records: Vec<Record>,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_blob(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    if r.read(&mut b8)? != 0 {
        return Err(Error::Format(format!(
            "{} has trailing bytes",
            path.display()
        )));
    }
    Ok(Tensor::new(shape, data)?)
}

/// Writes `dataset` under `dir` (created if missing). The manifest is written
/// last via a temporary file and rename.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    let w = dataset.spec.grid.1;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for (i, o) in dataset.samples.iter().enumerate() {
        let file = format!("samples/{i:06}.bin");
        write_blob(&dir.join(&file), &o.x)?;
        records.push(Record {
            file,
            subject: o.subject_id,
            context: o.context_id,
            label: o.label,
            split: o.split,
            instance_seed: o.instance_seed,
            mask: o
                .mask
                .chunks(w)
                .map(|row| row.iter().map(|&m| if m { '1' } else { '0' }).collect())
                .collect(),
        });
    }
    let hash = dataset.hash();
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_hash: hash.clone(),
        contextual: dataset.contextual,
        world: dataset.spec.clone(),
        split_plan: dataset.plan.clone(),
        counts: dataset.counts,
        assignments: dataset.assignments.clone(),
        records,
    };
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(hash)
}

/// Reads a dataset directory and verifies its recorded hash.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {}",
            m.schema_version
        )));
    }
    m.world.validate()?;
    let (h, w) = m.world.grid;
    let mut samples = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let x = read_blob(&dir.join(&r.file))?;
        if x.shape() != [h, w, m.world.feature_dim] {
            return Err(Error::Format(format!(
                "{} has shape {:?}",
                r.file,
                x.shape()
            )));
        }
        let mask: Vec<bool> = r
            .mask
            .iter()
            .flat_map(|row| row.chars().map(|ch| ch == '1'))
            .collect();
        if mask.len() != h * w {
            return Err(Error::Format(format!(
                "{} mask has {} cells",
                r.file,
                mask.len()
            )));
        }
        samples.push(Observation {
            x,
            mask,
            subject_id: r.subject,
            context_id: r.context,
            label: r.label,
            split: r.split,
            instance_seed: r.instance_seed,
        });
    }
    let d = Dataset {
        spec: m.world,
        plan: m.split_plan,
        counts: m.counts,
        assignments: m.assignments,
        samples,
        contextual: m.contextual,
    };
    let actual = d.hash();
    if actual != m.dataset_hash {
        return Err(Error::Integrity(format!(
            "dataset hash {actual} does not match manifest {}",
            m.dataset_hash
        )));
    }
    Ok(d)
}
