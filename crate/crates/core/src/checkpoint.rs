//! Checkpoint directory layout:
//!   config.txt   — architecture config (key=value)
//!   meta.txt     — epoch counter (next epoch to run)
//!   manifest.txt — one `kind:name<TAB>dims<TAB>offset<TAB>len` line per entry
//!   params.bin   — all entries concatenated as f64 LE
//!
//! Entries cover trainable parameters, batch-norm running stats, class
//! centers, and the RMSProp cache, so a resumed run continues bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, SeidError};
use crate::model::{ArchitectureConfig, Model};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;
use crate::train::{ClassCenters, RmsPropState};

pub struct Checkpoint {
    pub model: Model,
    pub centers: ClassCenters,
    pub opt: RmsPropState,
    /// Next epoch to run (0 = untrained).
    pub epoch: usize,
}

struct BlobWriter {
    manifest: String,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        BlobWriter {
            manifest: String::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, dims: &[usize], data: &[f64]) {
        let offset = self.blob.len() / 8;
        for &v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        self.manifest.push_str(&format!(
            "{key}\t{}\t{offset}\t{}\n",
            dims.join(","),
            data.len()
        ));
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), ckpt.model.cfg.to_text())?;
    fs::write(dir.join("meta.txt"), format!("epoch={}\n", ckpt.epoch))?;
    let mut w = BlobWriter::new();
    for (name, t) in ckpt.model.params.iter() {
        w.push(&format!("param:{name}"), t.shape.dims(), &t.data);
    }
    for (name, bn) in ckpt.model.bns.iter() {
        w.push(&format!("bn_mean:{name}"), &[bn.running_mean.len()], &bn.running_mean);
        w.push(&format!("bn_var:{name}"), &[bn.running_var.len()], &bn.running_var);
    }
    for (name, t) in &ckpt.opt.cache {
        w.push(&format!("opt:{name}"), t.shape.dims(), &t.data);
    }
    w.push(
        "centers",
        ckpt.centers.centers.shape.dims(),
        &ckpt.centers.centers.data,
    );
    fs::write(dir.join("manifest.txt"), &w.manifest)?;
    let mut f = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
    f.write_all(&w.blob)?;
    f.flush()?;
    Ok(())
}

fn parse_meta(text: &str) -> Result<usize> {
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("epoch=") {
            return v
                .parse()
                .map_err(|_| SeidError::Parse(format!("bad epoch '{v}'")));
        }
    }
    Err(SeidError::Parse("meta.txt has no epoch entry".to_string()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg = ArchitectureConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    let epoch = parse_meta(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let blob = fs::read(dir.join("params.bin"))?;
    if blob.len() % 8 != 0 {
        return Err(SeidError::Parse("params.bin length not a multiple of 8".to_string()));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut entries: IndexMap<String, Tensor> = IndexMap::new();
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(SeidError::Parse(format!(
                "manifest line {}: expected 4 fields",
                lineno + 1
            )));
        }
        let dims: Vec<usize> = parts[1]
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| SeidError::Parse(format!("manifest line {}: bad dim '{d}'", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| SeidError::Parse(format!("manifest line {}: bad offset", lineno + 1)))?;
        let len: usize = parts[3]
            .parse()
            .map_err(|_| SeidError::Parse(format!("manifest line {}: bad length", lineno + 1)))?;
        if offset + len > floats.len() {
            return Err(SeidError::Parse(format!(
                "manifest line {}: entry extends past params.bin",
                lineno + 1
            )));
        }
        let t = Tensor::from_dims(&dims, floats[offset..offset + len].to_vec())?;
        if entries.insert(parts[0].to_string(), t).is_some() {
            return Err(SeidError::Parse(format!(
                "manifest line {}: duplicate key '{}'",
                lineno + 1,
                parts[0]
            )));
        }
    }

    // rebuild against a freshly initialized model so missing/mismatched
    // entries are caught against the architecture, not trusted blindly
    let mut model = crate::model::build_model(&cfg)?;
    restore_params(&mut model.params, &entries, "param:")?;
    restore_bns(&mut model.bns, &entries)?;
    let mut opt = RmsPropState::new(&model.params);
    restore_cache(&mut opt, &entries)?;
    let centers_t = entries
        .get("centers")
        .ok_or_else(|| SeidError::Parse("checkpoint missing centers".to_string()))?;
    let cdims = centers_t.shape.dims();
    if cdims != [cfg.num_classes, cfg.channel_ledger().last().copied().unwrap()] {
        return Err(SeidError::Parse(format!(
            "centers shape {} does not match architecture",
            centers_t.shape
        )));
    }
    let centers = ClassCenters {
        centers: centers_t.clone(),
    };
    Ok(Checkpoint {
        model,
        centers,
        opt,
        epoch,
    })
}

fn fetch<'a>(
    entries: &'a IndexMap<String, Tensor>,
    key: &str,
    expect: &crate::tensor::Shape,
) -> Result<&'a Tensor> {
    let t = entries
        .get(key)
        .ok_or_else(|| SeidError::Parse(format!("checkpoint missing entry '{key}'")))?;
    if &t.shape != expect {
        return Err(SeidError::Parse(format!(
            "checkpoint entry '{key}' has shape {}, architecture wants {expect}",
            t.shape
        )));
    }
    Ok(t)
}

fn restore_params(
    params: &mut ParamStore,
    entries: &IndexMap<String, Tensor>,
    prefix: &str,
) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let shape = params.get(&name)?.shape.clone();
        let t = fetch(entries, &format!("{prefix}{name}"), &shape)?;
        params.get_mut(&name)?.data.copy_from_slice(&t.data);
    }
    Ok(())
}

fn restore_bns(bns: &mut BnStore, entries: &IndexMap<String, Tensor>) -> Result<()> {
    let names: Vec<String> = bns.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let state = bns.get_mut(&name)?;
        let shape = crate::tensor::Shape::new(vec![state.running_mean.len()])?;
        let mean = fetch(entries, &format!("bn_mean:{name}"), &shape)?;
        state.running_mean.copy_from_slice(&mean.data);
        let var = fetch(entries, &format!("bn_var:{name}"), &shape)?;
        state.running_var.copy_from_slice(&var.data);
    }
    Ok(())
}

fn restore_cache(opt: &mut RmsPropState, entries: &IndexMap<String, Tensor>) -> Result<()> {
    let names: Vec<String> = opt.cache.keys().cloned().collect();
    for name in names {
        let shape = opt.cache[&name].shape.clone();
        let t = fetch(entries, &format!("opt:{name}"), &shape)?;
        opt.cache.get_mut(&name).unwrap().data.copy_from_slice(&t.data);
    }
    Ok(())
}
