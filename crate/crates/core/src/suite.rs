//! Named gradient-check suite over every differentiable component, on
//! miniature configurations. Used by the CLI `gradcheck` command and the
//! acceptance tests.

use indexmap::IndexMap;

use crate::blocks::{
    self, Composite, ForwardCtx, InceptionDConfig, InceptionTConfig, SePlacement,
};
use crate::error::{Result, SeidError};
use crate::gradcheck::{grad_check_multi, GradCheckReport};
use crate::layers::{BnMode, ConvSpec, PoolSpec};
use crate::params::{BnStore, ParamStore};
use crate::se::{se_forward, SEParams};
use crate::tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::from_dims(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn component_names() -> Vec<&'static str> {
    vec![
        "relu",
        "sigmoid",
        "matmul",
        "conv2d",
        "max_pool",
        "avg_pool",
        "global_avg_pool",
        "batch_norm",
        "concat",
        "softmax_xent",
        "center_loss",
        "se_block",
        "inception_d",
        "inception_t",
    ]
}

fn check_one(name: &str, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    match name {
        "relu" => grad_check_multi(
            &[random(&[2, 3, 4, 4], 1)],
            |tape, v| {
                let y = tape.relu(v[0]);
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "sigmoid" => grad_check_multi(
            &[random(&[2, 5], 2)],
            |tape, v| {
                let y = tape.sigmoid(v[0]);
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "matmul" => grad_check_multi(
            &[random(&[3, 4], 3), random(&[4, 2], 4)],
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "conv2d" => {
            let spec = ConvSpec::new(2, 3, 3, 2, 1, true).unwrap();
            grad_check_multi(
                &[random(&[2, 2, 5, 5], 5), random(&[3, 2, 3, 3], 6), random(&[3], 7)],
                move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    Ok(tape.sum(y))
                },
                step,
                tolerance,
            )
        }
        "max_pool" => grad_check_multi(
            &[random(&[1, 2, 5, 5], 8)],
            |tape, v| {
                let y = tape.pool2d(v[0], PoolSpec::max(3, 2, 0))?;
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "avg_pool" => grad_check_multi(
            &[random(&[1, 2, 6, 6], 9)],
            |tape, v| {
                let y = tape.pool2d(v[0], PoolSpec::average(2, 2, 0))?;
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "global_avg_pool" => grad_check_multi(
            &[random(&[2, 3, 4, 4], 10)],
            |tape, v| {
                let y = tape.pool2d(v[0], PoolSpec::global_average())?;
                Ok(tape.sum(y))
            },
            step,
            tolerance,
        ),
        "batch_norm" => grad_check_multi(
            &[random(&[3, 2, 3, 3], 11), random(&[2], 12), random(&[2], 13)],
            |tape, v| {
                let mut state = crate::layers::BatchNormState::new(2);
                let y = tape.batch_norm(v[0], v[1], v[2], &mut state, BnMode::Train)?;
                // square so the loss is sensitive to the normalized scale
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            step,
            tolerance,
        ),
        "concat" => grad_check_multi(
            &[random(&[1, 2, 3, 3], 14), random(&[1, 3, 3, 3], 15)],
            |tape, v| {
                let y = tape.concat(&[v[0], v[1]])?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            step,
            tolerance,
        ),
        "softmax_xent" => grad_check_multi(
            &[random(&[3, 4], 16)],
            |tape, v| tape.softmax_cross_entropy(v[0], &[0, 2, 3]),
            step,
            tolerance,
        ),
        "center_loss" => {
            let centers = random(&[3, 4], 17);
            grad_check_multi(
                &[random(&[2, 4], 18)],
                move |tape, v| tape.center_loss(v[0], &[1, 2], &centers),
                step,
                tolerance,
            )
        }
        "se_block" => {
            let p = SEParams::init(4, 2, 19, "se")?;
            grad_check_multi(
                &[random(&[1, 4, 3, 3], 20), p.w1, p.b1, p.w2, p.b2],
                |tape, v| {
                    let se = crate::se::SeVars {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    };
                    let y = se_forward(tape, v[0], Some(&se), None)?;
                    Ok(tape.sum(y))
                },
                step,
                tolerance,
            )
        }
        "inception_d" => {
            let cfg = InceptionDConfig {
                growth_rate: 4,
                se_placement: SePlacement::BeforeInception,
                reduction: 2,
                composite: Composite::BnReluConv,
            };
            let mut params = ParamStore::new();
            let mut bns = BnStore::new();
            blocks::init_inception_d(&mut params, &mut bns, "layer", 8, &cfg, 21);
            grad_check_multi(
                &[random(&[1, 8, 6, 6], 22)],
                move |tape, v| {
                    let mut vars = IndexMap::new();
                    for (name, t) in params.iter() {
                        vars.insert(name.clone(), tape.leaf(t.clone(), false));
                    }
                    let mut bns = bns.clone();
                    let mut ctx = ForwardCtx {
                        tape,
                        vars: &vars,
                        bns: &mut bns,
                        mode: BnMode::Train,
                        gate_override: None,
                    };
                    let y = blocks::inception_d_forward(&mut ctx, v[0], "layer", &cfg)?;
                    Ok(ctx.tape.sum(y))
                },
                step,
                tolerance,
            )
        }
        "inception_t" => {
            let cfg = InceptionTConfig {
                in_channels: 6,
                se_placement: SePlacement::BeforeInception,
                reduction: 2,
                composite: Composite::BnReluConv,
            };
            let mut params = ParamStore::new();
            let mut bns = BnStore::new();
            blocks::init_inception_t(&mut params, &mut bns, "trans", &cfg, 23);
            grad_check_multi(
                &[random(&[1, 6, 7, 7], 24)],
                move |tape, v| {
                    let mut vars = IndexMap::new();
                    for (name, t) in params.iter() {
                        vars.insert(name.clone(), tape.leaf(t.clone(), false));
                    }
                    let mut bns = bns.clone();
                    let mut ctx = ForwardCtx {
                        tape,
                        vars: &vars,
                        bns: &mut bns,
                        mode: BnMode::Train,
                        gate_override: None,
                    };
                    let y = blocks::inception_t_forward(&mut ctx, v[0], "trans", &cfg)?;
                    Ok(ctx.tape.sum(y))
                },
                step,
                tolerance,
            )
        }
        other => Err(SeidError::contract(format!("unknown component '{other}'"))),
    }
}

/// Run the suite, optionally restricted to one component.
pub fn run_suite(
    component: Option<&str>,
    step: f64,
    tolerance: f64,
) -> Result<Vec<ComponentReport>> {
    let names = component_names();
    if let Some(c) = component {
        if !names.contains(&c) {
            return Err(SeidError::contract(format!(
                "unknown component '{c}'; known: {}",
                names.join(", ")
            )));
        }
    }
    names
        .into_iter()
        .filter(|n| component.is_none_or(|c| c == *n))
        .map(|n| {
            Ok(ComponentReport {
                name: n.to_string(),
                report: check_one(n, step, tolerance)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_at_default_tolerance() {
        let reports = run_suite(None, 1e-5, 1e-4).unwrap();
        assert_eq!(reports.len(), component_names().len());
        for r in &reports {
            assert!(
                r.report.pass,
                "{}: max_rel_error {}",
                r.name, r.report.max_rel_error
            );
        }
    }

    #[test]
    fn impossible_tolerance_fails() {
        let reports = run_suite(Some("conv2d"), 1e-5, 1e-15).unwrap();
        assert!(!reports[0].report.pass);
    }

    #[test]
    fn component_filter_and_unknown_name() {
        let reports = run_suite(Some("se_block"), 1e-5, 1e-4).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].name, "se_block");
        assert!(run_suite(Some("nonsense"), 1e-5, 1e-4).is_err());
    }
}
