//! ELBO optimization over a corpus: AdamW with linear decay schedules,
//! gradient clipping, per-step metrics, and bit-exact checkpoints.

use crate::corpus::ReasoningSample;
use crate::error::{Error, Result};
use crate::latent::build_elbo;
use crate::model::{ModelConfig, UniCogModel};
use crate::nn::{Grads, Graph, ParamSet};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySchedule {
    /// Weight-decay coefficient decays linearly to 0; learning rate constant.
    WeightDecay,
    /// Learning rate decays linearly to 0; weight decay constant.
    LearningRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Initial weight-decay coefficient.
    pub weight_decay: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// ELBO KL weight.
    pub beta: f64,
    /// Checkpoint cadence in steps.
    pub eval_every: usize,
    pub checkpoint_dir: PathBuf,
    pub decay_schedule: DecaySchedule,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    /// Stop once the 100-step rolling mean of per-token NLL drops below this.
    pub early_stop_nll: Option<f64>,
}

impl TrainConfig {
    pub fn desk_default(checkpoint_dir: PathBuf) -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            weight_decay: 0.01,
            total_steps: 2000,
            seed: 0,
            beta: 1.0,
            eval_every: 500,
            checkpoint_dir,
            decay_schedule: DecaySchedule::WeightDecay,
            grad_clip: 1.0,
            early_stop_nll: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Linear decay at 0-based step t: initial * (1 - t/total).
pub fn linear_decay(initial: f64, step: usize, total_steps: usize) -> f64 {
    initial * (1.0 - step as f64 / total_steps as f64)
}

/// Effective (learning rate, weight decay) at a step under the schedule.
pub fn schedule_at(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    match cfg.decay_schedule {
        DecaySchedule::WeightDecay => (
            cfg.learning_rate,
            linear_decay(cfg.weight_decay, step, cfg.total_steps),
        ),
        DecaySchedule::LearningRate => (
            linear_decay(cfg.learning_rate, step, cfg.total_steps),
            cfg.weight_decay,
        ),
    }
}

/// AdamW with decoupled weight decay (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params
                .iter()
                .map(|(_, e)| vec![0.0; e.tensor.numel()])
                .collect(),
            v: params
                .iter()
                .map(|(_, e)| vec![0.0; e.tensor.numel()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.get(id).to_vec();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let theta = params.get_mut(id).data_mut();
            for j in 0..theta.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * theta[j]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub lr: f64,
    pub wd: f64,
    pub nll_per_token: f64,
}

pub struct TrainReport {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub history: Vec<StepRecord>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Rolling-window mean per-token NLL at the end of training.
    pub final_nll_per_token: f64,
}

const NLL_WINDOW: usize = 100;
const SHUFFLE_STREAM: u64 = 0x53484646;
const NOISE_STREAM: u64 = 0x4e4f4953;

/// Optimizes the ELBO over all sentence units of the corpus. Writes
/// `metrics.csv` and `checkpoint.bin` (refreshed atomically every
/// `eval_every` steps) into `cfg.checkpoint_dir`. A non-finite loss aborts
/// with the last good checkpoint retained on disk.
pub fn train(
    model: &mut UniCogModel,
    corpus: &[ReasoningSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::data("training corpus is empty"));
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (si, sample) in corpus.iter().enumerate() {
        for ti in 0..sample.sentences.len() {
            items.push((si, ti));
        }
    }
    if items.is_empty() {
        return Err(Error::data("training corpus has no sentence units"));
    }

    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let metrics_path = cfg.checkpoint_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "step,loss,nll,kl,lr,wd")?;
    let checkpoint_path = cfg.checkpoint_dir.join("checkpoint.bin");

    let mut optimizer = AdamW::new(&model.params);
    let master = Rng::new(cfg.seed);
    let mut epoch = 0u64;
    let mut order = items.clone();
    master.substream(SHUFFLE_STREAM, epoch).shuffle(&mut order);
    let mut cursor = 0usize;

    let save = |model: &UniCogModel, optimizer: &AdamW, step: usize| -> Result<()> {
        save_checkpoint(
            &ModelCheckpoint {
                model_config: model.cfg.clone(),
                train_config: cfg.clone(),
                step: step as u64,
                rng_seed: cfg.seed,
                rng_word_pos: master.word_pos(),
            },
            model,
            optimizer,
            &checkpoint_path,
        )
    };

    // Step 0 checkpoint so an early abort always has a good state on disk.
    save(model, &optimizer, 0)?;

    let mut history: Vec<StepRecord> = Vec::new();
    let mut window: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut grads = Grads::zeros(&model.params);
    let mut stopped_early = false;
    let mut steps_run = 0usize;

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                epoch += 1;
                master.substream(SHUFFLE_STREAM, epoch).shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        grads.reset();
        let mut loss_sum = 0.0;
        let mut nll_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut token_count = 0usize;
        let mut failure: Option<String> = None;
        for (slot, &(si, ti)) in batch.iter().enumerate() {
            let seq = &corpus[si].sentences[ti];
            let noise_seed = derive_seed(cfg.seed ^ NOISE_STREAM, step as u64, slot as u64);
            let eps = Rng::new(noise_seed).normal_vec(model.cfg.latent.d);
            let mut g = Graph::with_nan_guard(&model.params);
            match build_elbo(&mut g, &model.cfg, &model.arch, seq, cfg.beta, &eps) {
                Ok(parts) => {
                    loss_sum += g.val(parts.loss).item();
                    nll_sum += g.val(parts.nll).item();
                    kl_sum += g.val(parts.kl).item();
                    token_count += seq.target_len();
                    g.backward(parts.loss, &mut grads)?;
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let b = batch.len() as f64;
        let loss = loss_sum / b;
        if failure.is_none() && (!loss.is_finite() || !grads.all_finite()) {
            failure = Some("non-finite loss or gradient".to_string());
        }
        if let Some(msg) = failure {
            metrics.flush()?;
            return Err(Error::runtime(format!(
                "training aborted at step {step}: {msg}; last good checkpoint retained at {}",
                checkpoint_path.display()
            )));
        }
        grads.scale(1.0 / b);

        let norm = grads.global_norm();
        if norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
        let (lr, wd) = schedule_at(cfg, step);
        optimizer.step(&mut model.params, &grads, lr, wd);
        steps_run = step + 1;

        let nll_per_token = nll_sum / token_count as f64;
        let rec = StepRecord {
            step,
            loss,
            nll: nll_sum / b,
            kl: kl_sum / b,
            lr,
            wd,
            nll_per_token,
        };
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            rec.step, rec.loss, rec.nll, rec.kl, rec.lr, rec.wd
        )?;
        history.push(rec);

        if window.len() == NLL_WINDOW {
            window.pop_front();
        }
        window.push_back(nll_per_token);

        if (step + 1) % cfg.eval_every == 0 {
            save(model, &optimizer, step + 1)?;
        }

        if let Some(target) = cfg.early_stop_nll {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            if mean < target {
                stopped_early = true;
                break;
            }
        }
    }

    save(model, &optimizer, steps_run)?;
    metrics.flush()?;

    let final_nll_per_token = if window.is_empty() {
        f64::NAN
    } else {
        window.iter().sum::<f64>() / window.len() as f64
    };
    Ok(TrainReport {
        steps_run,
        stopped_early,
        history,
        checkpoint_path,
        metrics_path,
        final_nll_per_token,
    })
}

const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UNCGCKPT";

/// Checkpoint metadata (everything except the tensor payload).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 units.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    checkpoint: ModelCheckpoint,
    adam_t: u64,
    arrays: Vec<ArrayEntry>,
    payload_len: usize,
    payload_crc32: u32,
}

/// File layout: 8-byte magic, u64 LE header length, JSON header (configs,
/// array manifest with shapes and offsets, payload CRC32), then a raw
/// little-endian f32 payload holding parameters and optimizer state.
pub fn save_checkpoint(
    meta: &ModelCheckpoint,
    model: &UniCogModel,
    optimizer: &AdamW,
    path: &Path,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut push_array = |name: String,
                          shape: Vec<usize>,
                          data: &[f64],
                          arrays: &mut Vec<ArrayEntry>,
                          payload: &mut Vec<u8>| {
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        arrays.push(ArrayEntry {
            name,
            shape,
            offset,
            len: data.len(),
        });
        offset += data.len();
    };

    for (id, entry) in model.params.iter() {
        push_array(
            format!("param.{}", entry.name),
            entry.tensor.shape().to_vec(),
            entry.tensor.data(),
            &mut arrays,
            &mut payload,
        );
        push_array(
            format!("adam.m.{}", entry.name),
            entry.tensor.shape().to_vec(),
            &optimizer.m[id.0],
            &mut arrays,
            &mut payload,
        );
        push_array(
            format!("adam.v.{}", entry.name),
            entry.tensor.shape().to_vec(),
            &optimizer.v[id.0],
            &mut arrays,
            &mut payload,
        );
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        checkpoint: meta.clone(),
        adam_t: optimizer.t,
        arrays,
        payload_len: offset,
        payload_crc32: crc32fast::hash(&payload),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::runtime(format!("serialize checkpoint header: {e}")))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(MAGIC)?;
    tmp.write_all(&(header_json.len() as u64).to_le_bytes())?;
    tmp.write_all(&header_json)?;
    tmp.write_all(&payload)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::runtime(format!("persist checkpoint: {e}")))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: ModelCheckpoint,
    pub model: UniCogModel,
    pub optimizer: AdamW,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::data("checkpoint truncated in header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[16 + header_len..];
    if payload.len() != header.payload_len * 4 {
        return Err(Error::data(format!(
            "checkpoint payload truncated: {} bytes, expected {}",
            payload.len(),
            header.payload_len * 4
        )));
    }
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(Error::data("checkpoint payload checksum mismatch"));
    }

    let mut model = UniCogModel::init(header.checkpoint.model_config.clone(), 0)?;
    let mut optimizer = AdamW::new(&model.params);
    optimizer.t = header.adam_t;

    let read_array = |entry: &ArrayEntry| -> Vec<f64> {
        let start = entry.offset * 4;
        payload[start..start + entry.len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };

    let mut seen = 0usize;
    for entry in &header.arrays {
        if entry.offset + entry.len > header.payload_len {
            return Err(Error::data(format!(
                "array {} out of payload bounds",
                entry.name
            )));
        }
        let (kind, name) = match entry.name.strip_prefix("param.") {
            Some(rest) => ("param", rest),
            None => match entry.name.strip_prefix("adam.m.") {
                Some(rest) => ("adam.m", rest),
                None => match entry.name.strip_prefix("adam.v.") {
                    Some(rest) => ("adam.v", rest),
                    None => {
                        return Err(Error::data(format!(
                            "malformed array name {}",
                            entry.name
                        )))
                    }
                },
            },
        };
        let pid = model
            .params
            .by_name(name)
            .ok_or_else(|| Error::data(format!("checkpoint array {name} unknown to this model")))?;
        if model.params.get(pid).numel() != entry.len {
            return Err(Error::data(format!("array {name} has wrong size")));
        }
        let values = read_array(entry);
        match kind {
            "param" => model.params.get_mut(pid).data_mut().copy_from_slice(&values),
            "adam.m" => optimizer.m[pid.0].copy_from_slice(&values),
            "adam.v" => optimizer.v[pid.0].copy_from_slice(&values),
            _ => unreachable!(),
        }
        seen += 1;
    }
    if seen != model.params.len() * 3 {
        return Err(Error::data(format!(
            "checkpoint holds {seen} arrays, model needs {}",
            model.params.len() * 3
        )));
    }
    Ok(LoadedCheckpoint {
        meta: header.checkpoint,
        model,
        optimizer,
    })
}

/// Rounds all parameters through f32, the checkpoint storage precision.
pub fn quantize_params_to_f32(model: &mut UniCogModel) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
