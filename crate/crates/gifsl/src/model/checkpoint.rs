//! Flat binary model checkpoints.
//!
//! Layout: magic `GIFS`, u32 version, u32 tensor count; then per tensor a
//! u32 name length, the UTF-8 name, u64 rows, u64 cols, and the row-major
//! values as little-endian 64-bit floats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::head::{ClassifierHead, HeadMode};
use crate::model::norm::NormLayer;
use crate::model::state::{BackboneSnapshot, ModelState};
use crate::model::Backbone;
use crate::numcore::{Matrix, ParamTensor};

const MAGIC: &[u8; 4] = b"GIFS";
const VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, name: &str, m: &Matrix) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn collect_tensors(model: &ModelState) -> Vec<(String, Matrix)> {
    let mut out: Vec<(String, Matrix)> = Vec::new();
    let meta = vec![
        match model.base_head.mode {
            HeadMode::NoBias => 0.0,
            HeadMode::Bias => 1.0,
            HeadMode::Cosine => 2.0,
        },
        model.base_head.temperature,
        model.backbone.b1.is_some() as u8 as f64,
        model.backbone.norm.is_some() as u8 as f64,
        model
            .backbone
            .norm
            .as_ref()
            .map_or(0.0, |n| n.frozen as u8 as f64),
        model
            .backbone
            .norm
            .as_ref()
            .map_or(0.0, |n| n.stat_momentum),
        model.backbone.norm.as_ref().map_or(0.0, |n| n.eps),
        model.snapshot_prev.is_some() as u8 as f64,
    ];
    out.push((
        "meta".into(),
        Matrix::from_vec(1, meta.len(), meta).unwrap(),
    ));
    for (name, m) in model.backbone.named_values() {
        out.push((format!("backbone.{name}"), m.clone()));
    }
    if let Some(norm) = &model.backbone.norm {
        out.push(("backbone.running_mean".into(), norm.running_mean.clone()));
        out.push(("backbone.running_var".into(), norm.running_var.clone()));
    }
    out.push((
        "base_head.weights".into(),
        model.base_head.weights.value.clone(),
    ));
    if let Some(b) = &model.base_head.bias {
        out.push(("base_head.bias".into(), b.value.clone()));
    }
    for (k, head) in model.novel_heads.iter().enumerate() {
        out.push((format!("novel{k}.weights"), head.weights.value.clone()));
        if let Some(b) = &head.bias {
            out.push((format!("novel{k}.bias"), b.value.clone()));
        }
    }
    if let Some(snap) = &model.snapshot_prev {
        for (name, m) in &snap.tensors {
            out.push((format!("snapshot.{name}"), m.clone()));
        }
    }
    out
}

pub fn save_model(path: &Path, model: &ModelState) -> Result<()> {
    let tensors = collect_tensors(model);
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    buf.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in &tensors {
        write_tensor(&mut buf, name, m)?;
    }
    crate::report::atomic_write(path, &buf)
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { path, buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "tensor name is not UTF-8".into(),
        })?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, m));
    }
    Ok(tensors)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let tensors = read_tensors(path)?;
    let get = |name: &str| -> Result<Matrix> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name}"),
            })
    };
    let meta = get("meta")?;
    let head_mode = match meta.get(0, 0) as i64 {
        0 => HeadMode::NoBias,
        1 => HeadMode::Bias,
        2 => HeadMode::Cosine,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad head mode code {other}"),
            })
        }
    };
    let temperature = meta.get(0, 1);
    let use_bias = meta.get(0, 2) != 0.0;
    let use_norm = meta.get(0, 3) != 0.0;

    let w1 = get("backbone.w1")?;
    let w2 = get("backbone.w2")?;
    let norm = if use_norm {
        let mut n = NormLayer::new(w1.cols());
        n.gamma = ParamTensor::new(get("backbone.gamma")?);
        n.beta = ParamTensor::new(get("backbone.beta")?);
        n.running_mean = get("backbone.running_mean")?;
        n.running_var = get("backbone.running_var")?;
        n.stat_momentum = meta.get(0, 5);
        n.eps = meta.get(0, 6);
        if meta.get(0, 4) != 0.0 {
            n.freeze();
        }
        Some(n)
    } else {
        None
    };
    let backbone = Backbone {
        w1: ParamTensor::new(w1),
        b1: use_bias
            .then(|| get("backbone.b1"))
            .transpose()?
            .map(ParamTensor::new),
        norm,
        w2: ParamTensor::new(w2),
        b2: use_bias
            .then(|| get("backbone.b2"))
            .transpose()?
            .map(ParamTensor::new),
    };

    let rebuild_head = |prefix: &str| -> Result<ClassifierHead> {
        let weights = get(&format!("{prefix}.weights"))?;
        let bias = tensors
            .iter()
            .find(|(n, _)| n == &format!("{prefix}.bias"))
            .map(|(_, m)| ParamTensor::new(m.clone()));
        Ok(ClassifierHead {
            mode: head_mode,
            weights: ParamTensor::new(weights),
            bias,
            temperature,
        })
    };
    let base_head = rebuild_head("base_head")?;
    let mut novel_heads = Vec::new();
    let mut k = 0;
    while tensors
        .iter()
        .any(|(n, _)| n == &format!("novel{k}.weights"))
    {
        novel_heads.push(rebuild_head(&format!("novel{k}"))?);
        k += 1;
    }
    let snapshot_prev = if meta.get(0, 7) != 0.0 {
        let names: Vec<&'static str> = {
            let mut v = vec!["w1"];
            if use_bias {
                v.push("b1");
            }
            if use_norm {
                v.push("gamma");
                v.push("beta");
            }
            v.push("w2");
            if use_bias {
                v.push("b2");
            }
            v
        };
        let mut snap = Vec::new();
        for name in names {
            snap.push((name, get(&format!("snapshot.{name}"))?));
        }
        Some(BackboneSnapshot { tensors: snap })
    } else {
        None
    };

    Ok(ModelState {
        backbone,
        base_head,
        novel_heads,
        snapshot_prev,
    })
}
