//! Experiment drivers shared by the CLI and the acceptance suite.
//!
//! All randomness derives from one run seed through named forks, so e.g.
//! changing the number of training steps leaves the data and the evaluation
//! episodes untouched.

use hyperproto::episodes::{make_gaussian_mixture, split_train_test_classes};
use hyperproto::training::{evaluate, radius_dynamics_run};
use hyperproto::{Dataset, Encoder, Metrics, RadiusTrace, Rng, TrainConfig, Trainer, Variant};

use crate::config::{DataSpec, EncoderSpec, ExportSpec, RunConfig};
use crate::error::Result;
use crate::export::{distance_matrix, embedding_rows, sample_instances, similarity_matrix};
use crate::io::load_dataset;
use crate::report::ShotRow;

pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const EPISODE_STREAM: u64 = 3;
pub const EVAL_STREAM: u64 = 4;
pub const EXPORT_STREAM: u64 = 5;

/// Named random streams of one run.
#[derive(Clone, Debug)]
pub struct Streams {
    root: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            root: Rng::new(seed, 0),
        }
    }

    pub fn data(&self) -> Rng {
        self.root.fork(DATA_STREAM)
    }

    pub fn init(&self) -> Rng {
        self.root.fork(INIT_STREAM)
    }

    pub fn episodes(&self) -> Rng {
        self.root.fork(EPISODE_STREAM)
    }

    pub fn eval(&self) -> Rng {
        self.root.fork(EVAL_STREAM)
    }

    pub fn export(&self) -> Rng {
        self.root.fork(EXPORT_STREAM)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(spec: &DataSpec, seed: u64) -> Result<Data> {
    match spec {
        DataSpec::Mixture {
            mixture,
            n_test_classes,
        } => {
            let mut rng = Streams::new(seed).data();
            let mut mixture = mixture.clone();
            mixture.seed = rng.derived_seed();
            let all = make_gaussian_mixture(&mixture)?;
            let (train, test) = split_train_test_classes(&all, *n_test_classes, &mut rng)?;
            Ok(Data { train, test })
        }
        DataSpec::Files { train, test } => Ok(Data {
            train: load_dataset(train)?,
            test: load_dataset(test)?,
        }),
    }
}

pub fn build_encoder(spec: &EncoderSpec, input_dim: usize, rng: &mut Rng) -> Result<Encoder> {
    Ok(match spec {
        EncoderSpec::Identity => Encoder::identity(input_dim)?,
        EncoderSpec::Mlp {
            hidden,
            output_dim,
            activation,
        } => {
            let dims: Vec<usize> = std::iter::once(input_dim)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(*output_dim))
                .collect();
            Encoder::mlp(&dims, *activation, rng)?
        }
    })
}

/// Initializes and trains on `train`; returns the trainer and per-step losses.
pub fn train(config: &TrainConfig, encoder: &EncoderSpec, train: &Dataset, seed: u64) -> Result<(Trainer, Vec<f64>)> {
    let streams = Streams::new(seed);
    let mut init = streams.init();
    let enc = build_encoder(encoder, train.dim(), &mut init)?;
    let mut config = config.clone();
    config.seed = seed;
    let mut trainer = Trainer::new(config, enc, train, &mut init)?;
    let losses = trainer.fit(train, &mut streams.episodes())?;
    Ok((trainer, losses))
}

/// Episodic evaluation with closed-form prototypes of the trained variant.
pub fn evaluate_trainer(trainer: &Trainer, test: &Dataset, seed: u64, jobs: usize) -> Result<Metrics> {
    Ok(evaluate(
        &trainer.encoder,
        test,
        &trainer.config,
        trainer.config.variant,
        &Streams::new(seed).eval(),
        jobs,
    )?)
}

/// Trains and evaluates hypersphere and vanilla-baseline prototypes once per
/// shot count. Every run uses the same seed.
pub fn shot_sweep(cfg: &RunConfig, data: &Data, seed: u64, jobs: usize) -> Result<Vec<ShotRow>> {
    let mut rows = Vec::new();
    for variant in [Variant::Hypersphere, Variant::Vanilla] {
        for &shot in &cfg.shots {
            let config = TrainConfig {
                variant,
                k_shot: shot,
                ..cfg.train.clone()
            };
            let (trainer, _) = train(&config, &cfg.encoder, &data.train, seed)?;
            let metrics = evaluate_trainer(&trainer, &data.test, seed, jobs)?;
            rows.push(ShotRow { variant, shot, metrics });
        }
    }
    Ok(rows)
}

/// Runs the radius-dynamics experiment on the training classes.
pub fn radius_dynamics(cfg: &RunConfig, train: &Dataset, seed: u64) -> Result<RadiusTrace> {
    let streams = Streams::new(seed);
    let mut init = streams.init();
    let enc = build_encoder(&cfg.encoder, train.dim(), &mut init)?;
    let config = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(config, enc, train, &mut init)?;
    Ok(radius_dynamics_run(
        &mut trainer,
        train,
        &cfg.radius_dynamics,
        &mut streams.episodes(),
    )?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrices {
    pub distance: Vec<Vec<f64>>,
    pub similarity: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Samples `n_classes × n_per_class` test instances and builds the exports.
pub fn export_matrices(trainer: &Trainer, test: &Dataset, spec: &ExportSpec, seed: u64) -> Result<Matrices> {
    let sample = sample_instances(
        &trainer.encoder,
        test,
        spec.n_classes,
        spec.n_per_class,
        &mut Streams::new(seed).export(),
    )?;
    Ok(Matrices {
        distance: distance_matrix(&sample, trainer.config.variant)?,
        similarity: similarity_matrix(&sample)?,
        embeddings: embedding_rows(&sample),
    })
}
