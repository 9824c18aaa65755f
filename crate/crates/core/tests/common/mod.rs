#![allow(dead_code)]

use std::path::PathBuf;

use dpfl::data::{ColumnKind, Record, RecordTable, Schema, SourceTag};
use proptest::prelude::*;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn cleveland_path() -> PathBuf {
    data_dir().join("processed.cleveland.data")
}

pub fn other_sites_path() -> PathBuf {
    data_dir().join("processed.other-sites.data")
}

fn cell_strategy(kind: &ColumnKind) -> BoxedStrategy<Option<f64>> {
    let value: BoxedStrategy<f64> = match kind {
        ColumnKind::Numeric => (-50i32..400).prop_map(|v| f64::from(v) / 2.0).boxed(),
        ColumnKind::Binary => prop::sample::select(vec![0.0, 1.0]).boxed(),
        ColumnKind::Categorical(levels) => prop::sample::select(levels.clone()).boxed(),
        ColumnKind::Target => return prop::sample::select(vec![0.0, 1.0]).prop_map(Some).boxed(),
    };
    prop_oneof![9 => value.prop_map(Some), 1 => Just(None)].boxed()
}

/// Random heart-disease tables with some missing feature cells. The first
/// row (when present) is complete so imputation always has a reference value.
pub fn heart_table(rows: std::ops::Range<usize>) -> impl Strategy<Value = RecordTable> {
    let schema = Schema::heart_disease();
    let row: Vec<BoxedStrategy<Option<f64>>> = schema
        .columns()
        .iter()
        .map(|c| cell_strategy(&c.kind))
        .collect();
    let full: Vec<BoxedStrategy<Option<f64>>> = schema
        .columns()
        .iter()
        .map(|c| {
            cell_strategy(&c.kind)
                .prop_filter("present", Option::is_some)
                .boxed()
        })
        .collect();
    (full, prop::collection::vec(row, rows)).prop_map(move |(full, mut rows)| {
        if !rows.is_empty() {
            rows[0] = full;
        }
        let rows = rows
            .into_iter()
            .map(|cells| Record { cells, site: None })
            .collect();
        RecordTable::new(Schema::heart_disease(), rows, SourceTag::Integrated).unwrap()
    })
}

/// Tables where both classes have at least `min_per_class` rows.
pub fn balanced_heart_table(
    rows: std::ops::Range<usize>,
    min_per_class: usize,
) -> impl Strategy<Value = RecordTable> {
    heart_table(rows).prop_filter("both classes populated", move |t| {
        let pos = t.rows.iter().filter(|r| r.cells[13] == Some(1.0)).count();
        pos >= min_per_class && t.len() - pos >= min_per_class
    })
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Clamped BCE evaluated from logits, so saturated outputs keep full
/// precision in the finite-difference oracle.
pub fn logit_loss(p: &dpfl::nn::ModelParams, x: &dpfl::matrix::Matrix, y: &[f64]) -> f64 {
    let clamp = dpfl::nn::PROB_CLAMP;
    let lo = clamp.ln() - (-clamp).ln_1p();
    let trace = dpfl::nn::forward(p, x, dpfl::nn::Mode::Eval).unwrap();
    let z = trace.pre.last().unwrap().as_slice();
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| {
            let z = z.clamp(lo, -lo);
            y * softplus(-z) + (1.0 - y) * softplus(z)
        })
        .sum();
    total / y.len() as f64
}

/// Worst coordinate of analytic vs central-difference gradient:
/// (index, analytic, numeric, relative error).
pub fn worst_gradient_error(
    p: &dpfl::nn::ModelParams,
    x: &dpfl::matrix::Matrix,
    y: &[f64],
    h: f64,
) -> (usize, f64, f64, f64) {
    let g: Vec<f64> = dpfl::nn::batch_grad(p, x, y, dpfl::nn::Mode::Eval)
        .unwrap()
        .values()
        .collect();
    let mut worst = (0, 0.0, 0.0, 0.0);
    for (i, &a) in g.iter().enumerate() {
        let shifted = |d: f64| {
            let mut q = p.clone();
            *q.values_mut().nth(i).unwrap() += d;
            logit_loss(&q, x, y)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        if err >= worst.3 {
            worst = (i, a, fd, err);
        }
    }
    worst
}

pub mod wire {
    use dpfl::dp::{NoiseSpec, PrivacySpec, Sampling};
    use dpfl::federation::{ClientUpdate, EvalReport, Hyperparams, Message, Metrics, RoundConfig};
    use dpfl::matrix::Matrix;
    use dpfl::nn::{DenseLayer, ModelParams};
    use dpfl::optim::OptimizerKind;
    use dpfl::train::TrainConfig;
    use proptest::prelude::*;

    fn value() -> impl Strategy<Value = f64> {
        prop_oneof![
            4 => -1e6f64..1e6,
            1 => prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
        ]
    }

    pub fn params() -> impl Strategy<Value = ModelParams> {
        prop::collection::vec(1usize..6, 2..5).prop_flat_map(|sizes| {
            let layers: Vec<_> = sizes
                .windows(2)
                .map(|w| {
                    let (i, o) = (w[0], w[1]);
                    (
                        prop::collection::vec(value(), i * o),
                        prop::collection::vec(value(), o),
                    )
                        .prop_map(move |(w, b)| DenseLayer {
                            weights: Matrix::from_vec(o, i, w),
                            bias: b,
                        })
                })
                .collect();
            layers.prop_map(|l| ModelParams::new(l).unwrap())
        })
    }

    pub fn metrics() -> impl Strategy<Value = Metrics> {
        prop::collection::vec(("[a-z_]{0,12}", value()), 0..6).prop_map(Metrics)
    }

    fn hyper() -> impl Strategy<Value = Hyperparams> {
        let privacy = prop::option::of(
            (
                any::<bool>(),
                0.01f64..100.0,
                1e-9f64..0.1,
                0.01f64..10.0,
                any::<bool>(),
            )
                .prop_map(|(target, noise, delta, clip_norm, fixed)| PrivacySpec {
                    noise: if target {
                        NoiseSpec::TargetEpsilon(noise)
                    } else {
                        NoiseSpec::Multiplier(noise)
                    },
                    delta,
                    clip_norm,
                    sampling: if fixed {
                        Sampling::Fixed
                    } else {
                        Sampling::Poisson
                    },
                }),
        );
        (
            any::<u32>(),
            any::<u32>(),
            1usize..100_000,
            1e-6f64..1.0,
            any::<bool>(),
            0.0f64..0.9,
            privacy,
        )
            .prop_map(
                |(local_epochs, total_rounds, batch_size, lr, adam, dropout, privacy)| {
                    Hyperparams {
                        local_epochs,
                        total_rounds,
                        train: TrainConfig {
                            batch_size,
                            lr,
                            optimizer: if adam {
                                OptimizerKind::Adam
                            } else {
                                OptimizerKind::Sgd
                            },
                            dropout,
                        },
                        privacy,
                    }
                },
            )
    }

    pub fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            any::<u32>().prop_map(|client_id| Message::Hello { client_id }),
            (any::<u32>(), hyper(), params()).prop_map(|(round, hyper, weights)| {
                Message::RoundConfig(RoundConfig {
                    round,
                    hyper,
                    weights,
                })
            }),
            (
                any::<u32>(),
                any::<u32>(),
                any::<u32>(),
                metrics(),
                params()
            )
                .prop_map(|(client_id, round, num_examples, metrics, weights)| {
                    Message::FitResult(ClientUpdate {
                        client_id,
                        round,
                        num_examples,
                        metrics,
                        weights,
                    })
                }),
            (any::<u32>(), params())
                .prop_map(|(round, weights)| Message::EvalRequest { round, weights }),
            (any::<u32>(), any::<u32>(), any::<u32>(), metrics()).prop_map(
                |(client_id, round, num_examples, metrics)| Message::EvalResult(EvalReport {
                    client_id,
                    round,
                    num_examples,
                    metrics,
                })
            ),
            Just(Message::Shutdown),
        ]
    }
}
