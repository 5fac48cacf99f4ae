//! The `MCMKLR1` model file.
//!
//! ```text
//! MCMKLR1\n
//! key=value\n ...        fixed key order, decimal integers, round-trip floats
//! \n
//! f64 LE arrays:         column (N, absent for the exact solver)
//!                        α for each model (N each)
//!                        training features (n·d, row-major)
//!                        scaler min and max (d each, only when scaled=1)
//! ```
//!
//! Training diagnostics are not stored; a loaded model has empty traces.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{FeatureMatrix, MinMaxScaler};
use crate::error::{KlrError, Result};
use crate::kernel::{GridSpec, KernelFamily, RadialKernel};
use crate::klr_fast::{BinaryModel, GridChoice, SolverKind, TrainConfig, TrainDiagnostics};
use crate::multiclass::MulticlassModel;
use crate::tensor_fft::LevelOrder;

pub const MAGIC: &[u8] = b"MCMKLR1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Binary(BinaryModel),
    Multiclass(MulticlassModel),
}

/// A model plus the feature scaler applied before training, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: SavedModel,
    pub scaler: Option<MinMaxScaler>,
}

impl SavedModel {
    fn binaries(&self) -> &[BinaryModel] {
        match self {
            SavedModel::Binary(b) => std::slice::from_ref(b),
            SavedModel::Multiclass(m) => &m.models,
        }
    }

    pub fn classes(&self) -> &[f64] {
        match self {
            SavedModel::Binary(b) => &b.classes,
            SavedModel::Multiclass(m) => &m.classes,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        match self {
            SavedModel::Binary(b) => &b.config,
            SavedModel::Multiclass(m) => &m.config,
        }
    }

    pub fn d(&self) -> usize {
        self.binaries()[0].d()
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_model(file: &ModelFile, mut w: impl Write) -> Result<()> {
    let models = file.model.binaries();
    let first = &models[0];
    let cfg = file.model.config();
    let (kind, n_models) = match &file.model {
        SavedModel::Binary(_) => ("binary", 1),
        SavedModel::Multiclass(m) => ("multiclass", m.models.len()),
    };
    if models.iter().any(|b| {
        b.solver != first.solver || b.alpha.len() != first.alpha.len() || b.train != first.train
    }) {
        return Err(KlrError::Format(
            "one-vs-all models must share solver, size and training data".into(),
        ));
    }
    let big_n = first.alpha.len();
    let (grid, grid_h) = match &cfg.grid {
        GridChoice::Auto { levels, h } => (format!("auto:{levels}"), join_f64(h)),
        GridChoice::Fixed(_) => ("fixed".to_string(), String::new()),
    };
    let header: Vec<(&str, String)> = vec![
        ("kind", kind.into()),
        ("solver", first.solver.name().into()),
        ("n", first.n_train().to_string()),
        ("N", big_n.to_string()),
        ("d", first.d().to_string()),
        ("q", first.order.q().to_string()),
        ("dims", join_usize(first.order.dims())),
        ("h", join_f64(&first.h)),
        ("kernel", cfg.kernel.family().name().into()),
        ("sigma", format!("{:?}", cfg.kernel.sigma())),
        ("lambda", format!("{:?}", cfg.lambda)),
        ("classes", join_f64(file.model.classes())),
        ("models", n_models.to_string()),
        ("grid", grid),
        ("grid_h", grid_h),
        ("tmax", cfg.t_max.to_string()),
        ("eps", format!("{:?}", cfg.eps)),
        ("delta", format!("{:?}", cfg.armijo_delta)),
        ("beta", format!("{:?}", cfg.armijo_beta)),
        ("max_backtracks", cfg.max_backtracks.to_string()),
        ("seed", cfg.seed.to_string()),
        ("scaled", u8::from(file.scaler.is_some()).to_string()),
    ];
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for (k, v) in header {
        buf.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    buf.push(b'\n');
    let mut put = |v: &[f64]| v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    if first.solver == SolverKind::Mcm {
        put(&first.column);
    }
    for b in models {
        put(&b.alpha);
    }
    put(first.train.as_slice());
    if let Some(s) = &file.scaler {
        put(&s.min);
        put(&s.max);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(file, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_model(std::fs::File::open(path)?)
}

struct Header(Vec<(String, String)>);

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| KlrError::Format(format!("missing header key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| KlrError::Format(format!("bad value {v:?} for header key {key:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| KlrError::Format(format!("bad entry {s:?} in header key {key:?}")))
            })
            .collect()
    }
}

const KEYS: [&str; 22] = [
    "kind", "solver", "n", "N", "d", "q", "dims", "h", "kernel", "sigma", "lambda", "classes",
    "models", "grid", "grid_h", "tmax", "eps", "delta", "beta", "max_backtracks", "seed", "scaled",
];

pub fn read_model(mut r: impl Read) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if !bytes.starts_with(MAGIC) {
        return Err(KlrError::Format("bad magic; not an MCMKLR1 model file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| KlrError::Format("header is not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&rest[..end + 1])
        .map_err(|_| KlrError::Format("header is not UTF-8".into()))?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| KlrError::Format(format!("header line {line:?} is not key=value")))?;
        entries.push((k.to_string(), v.to_string()));
    }
    let keys: Vec<&str> = entries.iter().map(|(k, _)| k.as_str()).collect();
    if keys != KEYS {
        let unknown = keys.iter().find(|k| !KEYS.contains(k));
        return Err(KlrError::Format(match unknown {
            Some(k) => format!("unknown header key {k:?}"),
            None => "header keys missing or out of order".into(),
        }));
    }
    let h = Header(entries);
    let payload = &rest[end + 2..];

    let kind = h.get("kind")?;
    let solver = match h.get("solver")? {
        "mcm" => SolverKind::Mcm,
        "exact" => SolverKind::Exact,
        s => return Err(KlrError::Format(format!("unknown solver {s:?}"))),
    };
    let n: usize = h.parse("n")?;
    let big_n: usize = h.parse("N")?;
    let d: usize = h.parse("d")?;
    let q: usize = h.parse("q")?;
    let dims: Vec<usize> = h.list("dims")?;
    let steps: Vec<f64> = h.list("h")?;
    let family: KernelFamily = h
        .get("kernel")?
        .parse()
        .map_err(|_| KlrError::Format("unknown kernel family".into()))?;
    let sigma: f64 = h.parse("sigma")?;
    let lambda: f64 = h.parse("lambda")?;
    let classes: Vec<f64> = h.list("classes")?;
    let n_models: usize = h.parse("models")?;
    let scaled = match h.get("scaled")? {
        "0" => false,
        "1" => true,
        s => return Err(KlrError::Format(format!("bad value {s:?} for header key \"scaled\""))),
    };

    let order = LevelOrder::new(dims).map_err(|e| KlrError::Format(e.to_string()))?;
    if order.q() != q || order.n() != big_n || big_n < n || n == 0 {
        return Err(KlrError::Format(format!(
            "inconsistent sizes: n={n}, N={big_n}, q={q}, dims={order}"
        )));
    }
    let grid = match h.get("grid")? {
        "fixed" => GridChoice::Fixed(
            GridSpec::new(steps.clone(), order.clone()).map_err(|e| KlrError::Format(e.to_string()))?,
        ),
        g => {
            let levels = g
                .strip_prefix("auto:")
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| KlrError::Format(format!("bad grid {g:?}")))?;
            GridChoice::Auto {
                levels,
                h: h.list("grid_h")?,
            }
        }
    };
    let kernel = RadialKernel::new(family, sigma).map_err(|e| KlrError::Format(e.to_string()))?;
    let config = TrainConfig {
        lambda,
        kernel,
        grid,
        t_max: h.parse("tmax")?,
        eps: h.parse("eps")?,
        armijo_delta: h.parse("delta")?,
        armijo_beta: h.parse("beta")?,
        max_backtracks: h.parse("max_backtracks")?,
        seed: h.parse("seed")?,
    };
    config.validate().map_err(|e| KlrError::Format(e.to_string()))?;

    let expect_models = match kind {
        "binary" => 1,
        "multiclass" => classes.len(),
        k => return Err(KlrError::Format(format!("unknown model kind {k:?}"))),
    };
    if n_models != expect_models || classes.len() < 2 {
        return Err(KlrError::Format(format!(
            "{n_models} models for {} classes in a {kind} file",
            classes.len()
        )));
    }
    let col_len = if solver == SolverKind::Mcm { big_n } else { 0 };
    let floats = col_len + n_models * big_n + n * d + if scaled { 2 * d } else { 0 };
    if payload.len() != 8 * floats {
        return Err(KlrError::Format(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            8 * floats
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |k: usize| values.by_ref().take(k).collect::<Vec<f64>>();
    let column = take(col_len);
    let alphas: Vec<Vec<f64>> = (0..n_models).map(|_| take(big_n)).collect();
    let train = Arc::new(FeatureMatrix::new(n, d, take(n * d))?);
    let scaler = scaled.then(|| MinMaxScaler {
        min: take(d),
        max: take(d),
    });

    let binary = |alpha: Vec<f64>, classes: Vec<f64>| BinaryModel {
        solver,
        alpha,
        config: config.clone(),
        order: order.clone(),
        h: steps.clone(),
        column: column.clone(),
        train: Arc::clone(&train),
        classes,
        diagnostics: TrainDiagnostics::default(),
    };
    let model = if kind == "binary" {
        SavedModel::Binary(binary(alphas.into_iter().next().expect("one model"), classes))
    } else {
        SavedModel::Multiclass(MulticlassModel {
            models: alphas.into_iter().map(|a| binary(a, vec![0.0, 1.0])).collect(),
            classes,
            config: config.clone(),
        })
    };
    Ok(ModelFile { model, scaler })
}
