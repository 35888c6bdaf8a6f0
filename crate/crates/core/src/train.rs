//! Training step, evaluation and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{collate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{one_hot, seg_loss_logits};
use crate::metrics::{evaluate, MaskPair, MetricReport};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::quantizer::CodebookStats;
use crate::rng::{RngState, SeededRng};
use crate::segnet::{predict_labels, ModelConfig, SegModel};
use crate::tensor::Tensor;

/// Loss values of one forward pass; `total == seg + quant` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    /// Weighted quantization loss.
    pub quant: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossReport,
    /// Codebook index of every latent token in the batch.
    pub indices: Vec<usize>,
}

/// Model, parameters, optimizer state and the data-order generator.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SegModel,
    pub store: ParamStore,
    pub opt: Sgd,
    pub rng: SeededRng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &ModelConfig, optim: OptimConfig, data_seed: u64) -> Result<Self> {
        let (model, store) = SegModel::init(config)?;
        let opt = Sgd::new(&store, optim.lr, optim.momentum, optim.weight_decay)?;
        Ok(Trainer {
            model,
            store,
            opt,
            rng: SeededRng::new(data_seed),
            step: 0,
        })
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.opt.lr,
            momentum: self.opt.momentum,
            weight_decay: self.opt.weight_decay,
        }
    }

    /// Loss of a batch at the current parameters, with gradients left in
    /// the store. Does not update anything.
    pub fn compute_gradients(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepOutput> {
        let s = images.shape();
        let cfg = &self.model.config;
        let truth = one_hot(labels, s[0], cfg.num_classes, s[2], s[3])?;
        self.store.zero_grads();
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let x = g.constant(images);
        let out = self.model.forward(&mut g, &b, x)?;
        let seg = seg_loss_logits(&mut g, out.logits, &truth)?;
        let quant = g.scale(out.quant_loss, cfg.quant_weight);
        let total = g.add(seg, quant)?;
        g.check_finite()?;
        g.backward(total)?;
        self.store.accumulate_grads(&g, &b)?;
        for (name, t) in self.store.iter() {
            if t.grad().is_some_and(|gr| gr.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(StepOutput {
            loss: LossReport {
                total: g.item(total),
                seg: g.item(seg),
                quant: g.item(quant),
            },
            indices: out.bottleneck.quant.indices,
        })
    }

    /// One SGD-with-momentum update on a batch.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepOutput> {
        let out = self.compute_gradients(images, labels)?;
        self.opt.step(&mut self.store)?;
        for (name, t) in self.store.iter() {
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        Ok(out)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir, self)
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Trainer> {
        load_checkpoint(dir)
    }
}

/// Label maps predicted for `images` (`[B, C, H, W]`), concatenated.
pub fn predict(model: &SegModel, store: &ParamStore, images: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.constant(images);
    let out = model.forward(&mut g, &b, x)?;
    g.check_finite()?;
    let labels = predict_labels(g.value(out.logits), g.shape(out.logits));
    Ok((labels, out.bottleneck.quant.indices))
}

/// Metric report and code usage of the model on a dataset.
pub fn evaluate_model(
    model: &SegModel,
    store: &ParamStore,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(MetricReport, CodebookStats)> {
    let classes = model.config.num_classes;
    let mut pairs = Vec::with_capacity(samples.len());
    let mut stats = CodebookStats::from_counts(vec![0; model.config.k]);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = collate(&refs)?;
        let (pred, indices) = predict(model, store, &images)?;
        stats.merge(&indices);
        let hw = chunk[0].mask.len();
        for (s, p) in chunk.iter().zip(pred.chunks_exact(hw)) {
            pairs.push(MaskPair::new(
                s.height(),
                s.width(),
                classes,
                p.to_vec(),
                s.mask.clone(),
            )?);
        }
    }
    Ok((evaluate(&pairs)?, stats))
}

/// Check that a dataset fits a model before any training.
pub fn check_compatible(config: &ModelConfig, data: &Dataset) -> Result<()> {
    data.spec.check_depth(config.stages())?;
    if data.spec.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.spec.num_classes, config.num_classes
        )));
    }
    if config.in_channels != 1 {
        return Err(Error::Config("synthetic images have one channel".into()));
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "synergynet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub rng_state: RngState,
    pub optimizer: OptimConfig,
    /// Parameter names in storage order; file `params/<name>.syt` and
    /// `momentum/<name>.syt` for each.
    pub params: Vec<String>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, t: &Trainer) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("momentum"))?;
    let mut names = Vec::with_capacity(t.store.len());
    for ((name, p), v) in t.store.iter().zip(t.opt.velocity()) {
        p.save(dir.join("params").join(format!("{name}.syt")))?;
        v.save(dir.join("momentum").join(format!("{name}.syt")))?;
        names.push(name.to_string());
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        config: t.model.config.clone(),
        step: t.step,
        rng_state: t.rng.state(),
        optimizer: t.optim(),
        params: names,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Trainer> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let integrity = |msg: String| Error::Integrity {
        path: mpath.clone(),
        msg,
    };
    let text = fs::read_to_string(&mpath).map_err(|e| integrity(e.to_string()))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| integrity(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(integrity(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let mut t = Trainer::new(&m.config, m.optimizer, 0)?;
    let layout: Vec<&str> = t.store.iter().map(|(n, _)| n).collect();
    if layout != m.params.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(integrity("parameter list does not match the model config".into()));
    }
    let mut velocity = Vec::with_capacity(m.params.len());
    for (i, id) in t.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let name = &m.params[i];
        let ppath = dir.join("params").join(format!("{name}.syt"));
        let vpath = dir.join("momentum").join(format!("{name}.syt"));
        let p = Tensor::load(&ppath)?;
        let v = Tensor::load(&vpath)?;
        let want = t.store.get(id).shape().to_vec();
        for (path, x) in [(&ppath, &p), (&vpath, &v)] {
            if x.shape() != want {
                return Err(Error::Integrity {
                    path: path.clone(),
                    msg: format!("shape {:?}, expected {want:?}", x.shape()),
                });
            }
        }
        t.store.get_mut(id).data_mut().copy_from_slice(p.data());
        velocity.push(v);
    }
    t.opt.set_velocity(velocity)?;
    t.rng = SeededRng::from_state(m.rng_state);
    t.step = m.step;
    Ok(t)
}
