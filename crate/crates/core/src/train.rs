//! Training, evaluation, distillation from a full-precision twin, and the
//! ablation ladder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{cosine_lr, AdamW, AdamWConfig, BinarizeMode, Tape, DEFAULT_LR};
use crate::data::{Dataset, DatasetSpec, Split};
use crate::model::{
    distillation_loss, parse_kv, parse_value, reject_unknown, softmax_probs, Checkpoint, Model,
    ModelConfig, Record, TensorData, Variant,
};
use crate::report::{EpochRecord, OpsReport, RunReport};
use crate::{Error, Result, Tensor};

const EVAL_CHUNK: usize = 250;

/// Everything a run needs besides data and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Epochs for the full-precision teacher; 0 disables distillation.
    pub teacher_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            epochs: 20,
            batch_size: 64,
            lr: DEFAULT_LR,
            weight_decay: AdamWConfig::default().weight_decay,
            lambda: 0.9,
            teacher_epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::LearningRate(self.lr));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Lambda(self.lambda));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn distills(&self) -> bool {
        self.model.binary && self.lambda > 0.0 && self.teacher_epochs > 0
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "teacher_epochs={}", self.teacher_epochs);
        s
    }

    fn apply(&mut self, kv: &mut BTreeMap<String, String>) -> Result<()> {
        self.model.apply_kv(kv)?;
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.remove($key) {
                    $field = parse_value($key, &v)?;
                }
            };
        }
        take!("epochs", self.epochs);
        take!("batch_size", self.batch_size);
        take!("lr", self.lr);
        take!("weight_decay", self.weight_decay);
        take!("lambda", self.lambda);
        take!("teacher_epochs", self.teacher_epochs);
        Ok(())
    }

    /// Keys absent from `text` keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        reject_unknown(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let preds = predict_all(model, data)?;
    let classes = model.config().classes;
    let correct = preds
        .data()
        .chunks(classes)
        .zip(&data.labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Logits for every sample, `[len, classes]`.
pub fn predict_all(model: &Model<f32>, data: &Dataset) -> Result<Tensor<f32>> {
    check_compatible(model.config(), data)?;
    let classes = model.config().classes;
    let mut out = Vec::with_capacity(data.len() * classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend_from_slice(model.predict(&x, chunk.len())?.data());
    }
    Tensor::new(&[data.len(), classes], out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.image_size != cfg.image_size || data.channels != cfg.in_channels {
        return Err(Error::Config(format!(
            "model expects {}×{}×{} images, data has {}×{}×{}",
            cfg.in_channels,
            cfg.image_size,
            cfg.image_size,
            data.channels,
            data.image_size,
            data.image_size
        )));
    }
    if data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            cfg.classes, data.classes
        )));
    }
    Ok(())
}

/// Optimizer, model and shuffling state of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    total_steps: usize,
    /// Per-step training loss, in order.
    pub losses: Vec<f32>,
}

impl Trainer {
    pub fn new(mut config: TrainConfig, seed: u64, train_len: usize) -> Result<Self> {
        config.model.seed = seed;
        config.validate()?;
        if train_len == 0 {
            return Err(Error::EmptyBatch);
        }
        let model = Model::new(config.model.clone())?;
        let opt = AdamW::new(&model.store, config.optimizer());
        let total_steps = config.epochs * train_len.div_ceil(config.batch_size);
        Ok(Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            step: 0,
            epoch: 0,
            total_steps,
            losses: Vec::new(),
            config,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One pass over `data` in a freshly shuffled order. `teacher` holds the
    /// teacher's probabilities for every training sample.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        teacher: Option<&Tensor<f32>>,
    ) -> Result<(f64, f64)> {
        check_compatible(&self.config.model, data)?;
        let lambda = if teacher.is_some() {
            self.config.lambda
        } else {
            0.0
        };
        let classes = self.config.model.classes;
        if let Some(t) = teacher {
            if t.shape() != [data.len(), classes] {
                return Err(Error::Shape(format!(
                    "teacher outputs {:?} for {} samples",
                    t.shape(),
                    data.len()
                )));
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = data.batch(chunk);
            if self.step == 0 && self.config.model.use_diba {
                self.model.calibrate_beta(&x, chunk.len())?;
            }
            let target = match teacher {
                Some(t) => {
                    let rows: Vec<f32> = chunk
                        .iter()
                        .flat_map(|&i| t.data()[i * classes..(i + 1) * classes].iter().copied())
                        .collect();
                    Some(Tensor::new(&[chunk.len(), classes], rows)?)
                }
                None => None,
            };
            let mut tape = Tape::new(BinarizeMode::Hard);
            let f = self.model.forward(&mut tape, &x, chunk.len())?;
            correct += tape
                .value(f.logits)
                .data()
                .chunks(classes)
                .zip(&y)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let loss = distillation_loss(&mut tape, f.logits, &y, target.as_ref(), lambda)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Config(format!(
                    "loss diverged at step {}",
                    self.step
                )));
            }
            let grads = tape.backward(loss)?;
            self.model.store.zero_grad();
            tape.accumulate_into(&mut self.model.store, &grads)?;
            let lr = cosine_lr(self.step, self.total_steps, self.config.lr)?;
            self.opt.step(&mut self.model.store, lr)?;
            self.losses.push(value);
            loss_sum += value as f64 * chunk.len() as f64;
            self.step += 1;
        }
        self.epoch += 1;
        Ok((
            loss_sum / data.len() as f64,
            correct as f64 / data.len() as f64,
        ))
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(
            self.step.min(self.total_steps),
            self.total_steps,
            self.config.lr,
        )
        .unwrap_or(0.0)
    }

    /// Parameters, optimizer moments, counters and shuffling RNG.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut records = self.model.param_records();
        for (id, p) in self.model.store.iter() {
            records.push(Record::from_tensor(
                format!("opt.m.{}", p.name),
                &self.opt.m[id.index()],
            ));
            records.push(Record::from_tensor(
                format!("opt.v.{}", p.name),
                &self.opt.v[id.index()],
            ));
        }
        let counters = vec![
            self.opt.step,
            self.step as u64,
            self.epoch as u64,
            self.total_steps as u64,
        ];
        records.push(Record {
            name: "train.counters".into(),
            shape: vec![4],
            data: TensorData::U64(counters),
        });
        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        records.push(Record {
            name: "train.rng".into(),
            shape: vec![rng.len()],
            data: TensorData::U8(rng),
        });
        records.push(Record {
            name: "train.losses".into(),
            shape: vec![self.losses.len()],
            data: TensorData::F32(self.losses.clone()),
        });
        Checkpoint {
            config: self.config.to_kv(),
            records,
        }
    }

    /// Resume exactly where [`Trainer::checkpoint`] left off.
    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_kv(&ckpt.config)?;
        let mut model = Model::from_checkpoint(ckpt)?;
        model.store.zero_grad();
        let mut opt = AdamW::new(&model.store, config.optimizer());
        for (id, p) in model.store.iter() {
            for (prefix, slot) in [("opt.m", &mut opt.m), ("opt.v", &mut opt.v)] {
                let name = format!("{prefix}.{}", p.name);
                let rec = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                slot[id.index()] = rec.to_tensor()?;
            }
        }
        let counters = match ckpt.get("train.counters").map(|r| &r.data) {
            Some(TensorData::U64(v)) if v.len() == 4 => v.clone(),
            _ => return Err(Error::Checkpoint("missing train.counters".into())),
        };
        opt.step = counters[0];
        let rng = match ckpt.get("train.rng").map(|r| &r.data) {
            Some(TensorData::U8(v)) if v.len() == 56 => {
                let seed: [u8; 32] = v[..32].try_into().expect("32");
                let stream = u64::from_le_bytes(v[32..40].try_into().expect("8"));
                let pos = u128::from_le_bytes(v[40..56].try_into().expect("16"));
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(pos);
                rng
            }
            _ => return Err(Error::Checkpoint("missing train.rng".into())),
        };
        let losses = match ckpt.get("train.losses").map(|r| &r.data) {
            Some(TensorData::F32(v)) => v.clone(),
            _ => Vec::new(),
        };
        Ok(Self {
            config,
            model,
            opt,
            rng,
            step: counters[1] as usize,
            epoch: counters[2] as usize,
            total_steps: counters[3] as usize,
            losses,
        })
    }
}

/// Teacher probabilities on the training set.
pub struct TeacherOutputs {
    pub probs: Tensor<f32>,
    pub test_acc: f64,
    pub model: Model<f32>,
}

/// Train the full-precision twin with cross-entropy only.
pub fn train_teacher(config: &TrainConfig, split: &Split, seed: u64) -> Result<TeacherOutputs> {
    let tcfg = TrainConfig {
        model: config.model.teacher(),
        epochs: config.teacher_epochs.max(1),
        lambda: 0.0,
        ..config.clone()
    };
    let mut t = Trainer::new(tcfg, seed, split.train.len())?;
    for _ in 0..t.config.epochs {
        t.run_epoch(&split.train, None)?;
    }
    let probs = softmax_probs(&predict_all(&t.model, &split.train)?);
    let test_acc = evaluate(&t.model, &split.test)?;
    Ok(TeacherOutputs {
        probs,
        test_acc,
        model: t.model,
    })
}

/// Full run: optional teacher, then the student with per-epoch evaluation.
/// `out` receives `model.ckpt`, `teacher.ckpt` and `report.txt`.
pub fn run(
    config: &TrainConfig,
    split: &Split,
    seed: u64,
    teacher: Option<&TeacherOutputs>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Trainer, RunReport)> {
    let start = Instant::now();
    let owned;
    let teacher = match (config.distills(), teacher) {
        (false, _) => None,
        (true, Some(t)) => Some(t),
        (true, None) => {
            owned = train_teacher(config, split, seed)?;
            if let Some(dir) = out {
                let ckpt = Checkpoint {
                    config: TrainConfig {
                        model: owned.model.config().clone(),
                        ..config.clone()
                    }
                    .to_kv(),
                    records: owned.model.param_records(),
                };
                ckpt.save(&dir.join("teacher.ckpt"))?;
            }
            Some(&owned)
        }
    };
    let mut trainer = Trainer::new(config.clone(), seed, split.train.len())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let t0 = Instant::now();
        let (loss, train_acc) = trainer.run_epoch(&split.train, teacher.map(|t| &t.probs))?;
        let test_acc = evaluate(&trainer.model, &split.test)?;
        let rec = EpochRecord {
            epoch: trainer.epoch(),
            loss,
            train_acc,
            test_acc,
            lr: trainer.current_lr(),
            wall_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
    }
    let report = RunReport {
        label: label_of(&trainer.config.model),
        params: trainer.model.parameter_count(),
        epochs,
        ops: OpsReport::for_config(&trainer.config.model),
        wall_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        trainer.checkpoint().save(&dir.join("model.ckpt"))?;
        std::fs::write(dir.join("report.txt"), report.render())?;
    }
    Ok((trainer, report))
}

fn label_of(cfg: &ModelConfig) -> String {
    if !cfg.binary {
        return "full-precision".into();
    }
    Variant::LADDER
        .iter()
        .find(|v| v.flags() == (cfg.use_diba, cfg.use_hfsc, cfg.use_irprelu))
        .map_or_else(|| "custom".into(), |v| v.label().into())
}

/// Settings of the toy ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPreset {
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl AblationPreset {
    pub fn toy() -> Self {
        let train = TrainConfig::default();
        let data = DatasetSpec::synthetic(5000, 42, train.model.image_size);
        Self { train, data }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub teacher_acc: f64,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>8}  per-seed", "variant", "mean");
        for r in &self.rows {
            let per: Vec<String> = r
                .accuracies
                .iter()
                .map(|a| format!("{:.2}", 100.0 * a))
                .collect();
            let _ = writeln!(
                s,
                "{:<20} {:>8.2}  {}",
                r.variant.label(),
                100.0 * r.mean(),
                per.join(" ")
            );
        }
        let _ = writeln!(
            s,
            "{:<20} {:>8.2}",
            "teacher (fp)",
            100.0 * self.teacher_acc
        );
        s
    }

    /// Mean accuracy never drops along the ladder.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean() >= w[0].mean())
    }

    /// Last rung minus first rung, in accuracy points.
    pub fn gain_points(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => 100.0 * (b.mean() - a.mean()),
            _ => 0.0,
        }
    }
}

/// Train all four variants for every seed. One teacher, trained with the
/// first seed, serves every student.
pub fn ablation_ladder(
    preset: &AblationPreset,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let first = *seeds
        .first()
        .ok_or_else(|| Error::Config("no seeds given".into()))?;
    let split = preset.data.load()?;
    let teacher = if preset.train.distills() {
        let t = train_teacher(&preset.train, &split, first)?;
        progress(&format!("teacher test_acc={:.4}", t.test_acc));
        Some(t)
    } else {
        None
    };
    let mut rows = Vec::new();
    for variant in Variant::LADDER {
        let cfg = TrainConfig {
            model: preset.train.model.clone().with_variant(variant),
            ..preset.train.clone()
        };
        let mut accuracies = Vec::new();
        for &seed in seeds {
            let (_, report) = run(&cfg, &split, seed, teacher.as_ref(), None, |_| {})?;
            let acc = report.final_accuracy().unwrap_or(0.0);
            progress(&format!(
                "variant={} seed={seed} test_acc={acc:.4} wall_s={:.1}",
                variant.label(),
                report.wall_s
            ));
            accuracies.push(acc);
        }
        rows.push(AblationRow {
            variant,
            accuracies,
        });
    }
    Ok(AblationTable {
        rows,
        teacher_acc: teacher.map_or(f64::NAN, |t| t.test_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_shapes;

    fn tiny() -> (TrainConfig, Split) {
        let model = ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            ..ModelConfig::toy()
        };
        let cfg = TrainConfig {
            model,
            epochs: 2,
            batch_size: 16,
            teacher_epochs: 1,
            ..TrainConfig::default()
        };
        let mut train = synthetic_shapes(48, 16, 3).unwrap();
        let mut test = synthetic_shapes(20, 16, 4).unwrap();
        train.normalize(&[0.5; 3], &[0.25; 3]);
        test.normalize(&[0.5; 3], &[0.25; 3]);
        (cfg, Split { train, test })
    }

    #[test]
    fn config_kv_round_trip() {
        let c = TrainConfig {
            lambda: 0.25,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::from_kv("lambda=1.5").is_err());
        assert!(TrainConfig::from_kv("lr=0").is_err());
        assert!(TrainConfig::from_kv("epochs=0").is_err());
        assert_eq!(TrainConfig::default().lambda, 0.9);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, split) = tiny();
        let mut a = Trainer::new(cfg.clone(), 5, split.train.len()).unwrap();
        a.run_epoch(&split.train, None).unwrap();
        a.run_epoch(&split.train, None).unwrap();

        let mut b = Trainer::new(cfg, 5, split.train.len()).unwrap();
        b.run_epoch(&split.train, None).unwrap();
        let mut buf = Vec::new();
        b.checkpoint().write(&mut buf).unwrap();
        let mut c = Trainer::restore(&Checkpoint::read(&mut buf.as_slice()).unwrap()).unwrap();
        c.run_epoch(&split.train, None).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&c.losses));
        assert_eq!(a.checkpoint(), c.checkpoint());
    }

    #[test]
    fn distillation_run_writes_outputs() {
        let (cfg, split) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let (_, report) = run(&cfg, &split, 1, None, Some(dir.path()), |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(report.epochs.len(), 2);
        for f in ["model.ckpt", "teacher.ckpt", "report.txt"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let ckpt = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
        let m = Model::<f32>::from_checkpoint(&ckpt).unwrap();
        let acc = evaluate(&m, &split.test).unwrap();
        assert_eq!(acc, report.final_accuracy().unwrap());
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (cfg, _) = tiny();
        let m = Model::<f32>::new(cfg.model).unwrap();
        let other = synthetic_shapes(4, 32, 0).unwrap();
        assert!(evaluate(&m, &other).is_err());
    }
}
