//! The gradient-check suite run by `gald gradcheck` and the acceptance
//! tests: every differentiable op on small random inputs, then each context
//! module, LD strategy and arrangement on `1 x 8 x 16 x 16` features, then
//! the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::config::GaldConfig;
use crate::context::{ga_forward, GaKind, GaSpec};
use crate::error::Result;
use crate::gald::{arrangement_forward, ld_mask, Arrangement, LdSpec, LdStrategy};
use crate::gradcheck::{gradcheck, gradcheck_many, weighted_mean, GradcheckOptions, GradcheckReport};
use crate::nn::{gradcheck_params, Conv2dSpec, Ctx, Init, LayerParams, Mode};
use crate::segnet::forward_model;
use crate::tensor::Tensor;

/// Tolerance of checks that go through train-mode batch norm.
pub const BN_TRAIN_TOL: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// Input size of the module checks.
pub const MODULE_INPUT: [usize; 4] = [1, 8, 16, 16];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub tol: f64,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub pass: bool,
    pub checks: usize,
    pub failing: Vec<String>,
    pub entries: Vec<SuiteEntry>,
}

type Check = Box<dyn Fn() -> Result<GradcheckReport>>;

struct Case {
    name: String,
    tol: f64,
    run: Check,
}

fn case(name: impl Into<String>, tol: f64, run: impl Fn() -> Result<GradcheckReport> + 'static) -> Case {
    Case {
        name: name.into(),
        tol,
        run: Box::new(run),
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[0.1, 1]` with random sign, away from the ReLU and max kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn opts(tol: f64) -> GradcheckOptions {
    GradcheckOptions::default().with_tol(tol)
}

/// Three seeded repetitions of a single-input check.
fn repeat(
    make: impl Fn(u64) -> Tensor + 'static,
    f: impl Fn(&mut Tape, Var) -> Result<Var> + Copy + 'static,
) -> impl Fn() -> Result<GradcheckReport> {
    move || {
        let mut acc: Option<GradcheckReport> = None;
        for s in 0..3 {
            let x = make(s);
            let r = gradcheck(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_mean(t, y, 100 + s)
                },
                &x,
                &opts(TOL),
            )?;
            acc = Some(match acc {
                Some(a) => a.merge(r),
                None => r,
            });
        }
        Ok(acc.expect("three runs"))
    }
}

fn repeat_many(
    make: impl Fn(u64) -> Vec<Tensor> + 'static,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy + 'static,
) -> impl Fn() -> Result<GradcheckReport> {
    move || {
        let mut acc: Option<GradcheckReport> = None;
        for s in 0..3 {
            let xs = make(s);
            let r = gradcheck_many(
                |t, vs| {
                    let y = f(t, vs)?;
                    weighted_mean(t, y, 200 + s)
                },
                &xs,
                &opts(TOL),
            )?;
            acc = Some(match acc {
                Some(a) => a.merge(r),
                None => r,
            });
        }
        Ok(acc.expect("three runs"))
    }
}

fn op_cases() -> Vec<Case> {
    let small = |s| random(&[2, 3, 4], s, -1.0, 1.0);
    let mut v = vec![
        case(
            "op/add",
            TOL,
            repeat_many(
                move |s| vec![small(s), random(&[1, 3, 1], s + 9, -1.0, 1.0)],
                |t, x| t.add(x[0], x[1]),
            ),
        ),
        case(
            "op/sub",
            TOL,
            repeat_many(
                move |s| vec![small(s), random(&[4], s + 9, -1.0, 1.0)],
                |t, x| t.sub(x[0], x[1]),
            ),
        ),
        case(
            "op/mul",
            TOL,
            repeat_many(
                move |s| vec![small(s), random(&[2, 1, 4], s + 9, -1.0, 1.0)],
                |t, x| t.mul(x[0], x[1]),
            ),
        ),
        case(
            "op/sigmoid",
            TOL,
            repeat(move |s| random(&[2, 3, 4], s, -3.0, 3.0), |t, x| t.sigmoid(x)),
        ),
        case(
            "op/relu",
            TOL,
            repeat(move |s| away_from_zero(&[2, 3, 4], s), |t, x| t.relu(x)),
        ),
        case("op/exp", TOL, repeat(small, |t, x| t.exp(x))),
        case(
            "op/log",
            TOL,
            repeat(move |s| random(&[2, 3, 4], s, 0.2, 2.0), |t, x| t.log(x)),
        ),
        case(
            "op/matmul",
            TOL,
            repeat_many(
                move |s| vec![random(&[4, 5], s, -1.0, 1.0), random(&[5, 3], s + 9, -1.0, 1.0)],
                |t, x| t.matmul(x[0], x[1]),
            ),
        ),
        case(
            "op/matmul_batched",
            TOL,
            repeat_many(
                move |s| vec![random(&[2, 3, 4], s, -1.0, 1.0), random(&[2, 4, 2], s + 9, -1.0, 1.0)],
                |t, x| t.matmul(x[0], x[1]),
            ),
        ),
        case("op/softmax", TOL, repeat(small, |t, x| t.softmax(x, 2))),
        case("op/sum", TOL, repeat(small, |t, x| t.sum(x, &[0, 2], true))),
        case("op/mean", TOL, repeat(small, |t, x| t.mean(x, &[1], false))),
        case(
            "op/max",
            TOL,
            repeat(move |s| random(&[2, 3, 4], s, -1.0, 1.0), |t, x| t.max(x, &[2], false)),
        ),
        case(
            "op/concat",
            TOL,
            repeat_many(
                move |s| {
                    vec![
                        random(&[1, 2, 3, 3], s, -1.0, 1.0),
                        random(&[1, 3, 3, 3], s + 9, -1.0, 1.0),
                    ]
                },
                |t, x| t.concat(&[x[0], x[1]], 1),
            ),
        ),
        case("op/slice", TOL, repeat(small, |t, x| t.slice(x, 2, 1, 2))),
        case("op/transpose", TOL, repeat(small, |t, x| t.transpose(x))),
        case("op/reshape", TOL, repeat(small, |t, x| t.reshape(x, &[6, 4]))),
        case(
            "op/adaptive_avg_pool2d",
            TOL,
            repeat(
                move |s| random(&[1, 2, 5, 7], s, -1.0, 1.0),
                |t, x| t.adaptive_avg_pool2d(x, (2, 3)),
            ),
        ),
        case(
            "op/bilinear_resize",
            TOL,
            repeat(
                move |s| random(&[1, 2, 3, 4], s, -1.0, 1.0),
                |t, x| t.bilinear_resize(x, (5, 7)),
            ),
        ),
        case(
            "op/bilinear_resize_down",
            TOL,
            repeat(
                move |s| random(&[1, 2, 6, 5], s, -1.0, 1.0),
                |t, x| t.bilinear_resize(x, (3, 2)),
            ),
        ),
    ];
    let conv = Conv2dSpec::new(4, 6, 3).dilation(2).padding(2).groups(2);
    v.push(case(
        "op/conv2d",
        TOL,
        repeat_many(
            move |s| {
                vec![
                    random(&[2, 4, 6, 6], s, -1.0, 1.0),
                    random(&conv.weight_shape(), s + 9, -0.5, 0.5),
                    random(&[6], s + 19, -0.5, 0.5),
                ]
            },
            move |t, x| t.conv2d(x[0], x[1], Some(x[2]), &conv),
        ),
    ));
    let strided = Conv2dSpec::depthwise(3, 3).stride(2).padding(1);
    v.push(case(
        "op/conv2d_depthwise_stride",
        TOL,
        repeat_many(
            move |s| {
                vec![
                    random(&[1, 3, 7, 7], s, -1.0, 1.0),
                    random(&strided.weight_shape(), s + 9, -0.5, 0.5),
                ]
            },
            move |t, x| t.conv2d(x[0], x[1], None, &strided),
        ),
    ));
    v.push(case(
        "op/batch_norm_train",
        TOL,
        repeat_many(
            |s| {
                vec![
                    random(&[2, 3, 4, 4], s, -1.0, 1.0),
                    random(&[3], s + 9, 0.5, 1.5),
                    random(&[3], s + 19, -0.5, 0.5),
                ]
            },
            |t, x| Ok(t.batch_norm(x[0], x[1], x[2], None, 1e-5)?.0),
        ),
    ));
    v.push(case(
        "op/batch_norm_eval",
        TOL,
        repeat_many(
            |s| {
                vec![
                    random(&[2, 3, 4, 4], s, -1.0, 1.0),
                    random(&[3], s + 9, 0.5, 1.5),
                    random(&[3], s + 19, -0.5, 0.5),
                ]
            },
            |t, x| {
                let stats = crate::nn::BatchStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                Ok(t.batch_norm(x[0], x[1], x[2], Some(&stats), 1e-5)?.0)
            },
        ),
    ));
    let labels = [2u8, 0, 255, 1, 1, 0, 2, 2];
    v.push(case(
        "op/cross_entropy",
        TOL,
        repeat(
            move |s| random(&[2, 3, 2, 2], s, -2.0, 2.0),
            move |t, x| t.cross_entropy(x, &labels, 255),
        ),
    ));
    v.push(case(
        "op/ohem_loss",
        TOL,
        repeat(
            move |s| random(&[2, 3, 2, 2], s, -2.0, 2.0),
            move |t, x| t.ohem_loss(x, &labels, 0.5, 1, 255),
        ),
    ));
    v
}

/// Finite-difference check of a module with respect to its input and every
/// trainable parameter, with a random weighting of the output.
fn module_check(
    mode: Mode,
    tol: f64,
    input: Tensor,
    seed: u64,
    coords: usize,
    f: impl Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let shape = input.shape().to_vec();
    let mut params = LayerParams::new(seed);
    params.insert("input", input, true);
    let objective = |ctx: &mut Ctx<'_>| {
        let x = ctx.param("input", &shape, Init::Zeros)?;
        let y = f(ctx, x)?;
        weighted_mean(ctx.tape, y, seed + 1)
    };
    {
        // first pass creates the parameters
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Eval);
        objective(&mut ctx)?;
    }
    perturb(&mut params, seed + 2);
    let names = params.trainable_names();
    gradcheck_params(&params, &names, mode, &opts(tol).sampled(coords, seed), objective)
}

/// Moves the check to a generic point: random BN affine and running
/// statistics, and nonzero conv biases. Zero biases leave dead ReLU channels
/// at exactly 0, on the kink, where central differences are one-sided.
fn perturb(params: &mut LayerParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, e) in params.iter_mut() {
        let (lo, hi) = if name.ends_with("bn.weight") || name.ends_with("running_var") {
            (0.5, 1.5)
        } else if name.ends_with("bn.bias") || name.ends_with("running_mean") {
            (-0.5, 0.5)
        } else if name.ends_with(".bias") {
            (-0.2, 0.2)
        } else {
            continue;
        };
        for v in e.value.data_mut() {
            *v = rng.random_range(lo..hi);
        }
    }
}

fn module_ga(cfg: &GaldConfig, kind: GaKind) -> GaSpec {
    GaSpec {
        kind,
        channels: MODULE_INPUT[1],
        inner_channels: MODULE_INPUT[1] / 2,
        downsample_input: cfg.ga.downsample_input.filter(|_| kind == cfg.ga.kind),
        ..cfg.ga.clone()
    }
}

fn module_cases(cfg: &GaldConfig) -> Vec<Case> {
    const COORDS: usize = 12;
    let mut v = Vec::new();
    let input = |seed| random(&MODULE_INPUT, seed, -1.0, 1.0);
    let kinds = [GaKind::Psp, GaKind::Aspp, GaKind::Nonlocal, GaKind::Cgnl];
    for (k, &kind) in kinds.iter().enumerate() {
        let ga = module_ga(cfg, kind);
        let seed = 300 + k as u64;
        v.push(case(format!("ga/{}", kind.as_str()), BN_TRAIN_TOL, move || {
            module_check(Mode::Train, BN_TRAIN_TOL, input(seed), seed, COORDS, |ctx, x| {
                ga_forward(ctx, x, &ga, "ga")
            })
        }));
    }
    for (s, &strategy) in LdStrategy::ALL.iter().enumerate() {
        let ld = LdSpec { strategy, ..cfg.ld };
        let seed = 400 + s as u64;
        v.push(case(format!("ld/{}", strategy.as_str()), TOL, move || {
            module_check(Mode::Train, TOL, input(seed), seed, COORDS, |ctx, x| {
                ld_mask(ctx, x, &ld, "ld")
            })
        }));
    }
    for (a, &arr) in Arrangement::ALL.iter().enumerate() {
        for (k, &kind) in kinds.iter().enumerate() {
            for (s, &strategy) in LdStrategy::ALL.iter().enumerate() {
                let ga = module_ga(cfg, kind);
                let ld = LdSpec { strategy, ..cfg.ld };
                let seed = 1000 + (a * 100 + k * 10 + s) as u64;
                let name = format!("arrangement/{}/{}/{}", arr.as_str(), kind.as_str(), strategy.as_str());
                v.push(case(name, BN_TRAIN_TOL, move || {
                    module_check(Mode::Train, BN_TRAIN_TOL, input(seed), seed, COORDS, |ctx, x| {
                        Ok(arrangement_forward(ctx, x, arr, &ga, &ld)?.features)
                    })
                }));
            }
        }
    }
    v
}

fn model_case(cfg: &GaldConfig) -> Case {
    let cfg = cfg.clone();
    case("model", BN_TRAIN_TOL, move || {
        let seed = 77;
        let x = random(&[1, cfg.backbone.in_ch, 32, 32], seed, 0.0, 1.0);
        let mut params = LayerParams::new(seed);
        crate::segnet::init_model(&cfg, &mut params, 32, 32)?;
        perturb(&mut params, seed);
        let names = params.trainable_names();
        let o = opts(BN_TRAIN_TOL).sampled(3, seed).kink_aware();
        gradcheck_params(&params, &names, Mode::Train, &o, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let out = forward_model(ctx, xv, &cfg)?;
            weighted_mean(ctx.tape, out.logits, seed)
        })
    })
}

struct FaultySquare;

impl Backward for FaultySquare {
    fn name(&self) -> &'static str {
        "faulty_square"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        // should be 2x; the factor 3 is the injected fault
        let g = ctx.inputs[0]
            .data()
            .iter()
            .zip(ctx.grad_output)
            .map(|(x, g)| 3.0 * x * g);
        vec![Some(g.collect())]
    }
}

fn fault_case() -> Case {
    case("fault/faulty_square", TOL, || {
        gradcheck(
            |t, x| {
                let v = t.value(x).data().iter().map(|a| a * a).collect();
                let y = t.record(Tensor::new(t.shape(x), v)?, &[x], FaultySquare);
                t.sum_all(y)
            },
            &random(&[4], 5, 0.5, 1.0),
            &opts(TOL),
        )
    })
}

/// Names of every check, in run order.
pub fn check_names(cfg: &GaldConfig) -> Vec<String> {
    all_cases(cfg, false).into_iter().map(|c| c.name).collect()
}

fn all_cases(cfg: &GaldConfig, inject_fault: bool) -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(module_cases(cfg));
    cases.push(model_case(cfg));
    if inject_fault {
        cases.push(fault_case());
    }
    cases
}

/// A check is selected when `filter` equals its name or one of its
/// `/`-separated components, so `cgnl` selects every check involving CGNL
/// and `op` selects the op checks.
fn selected(name: &str, filter: Option<&str>) -> bool {
    match filter {
        None => true,
        Some(f) => name == f || name.split('/').any(|part| part == f),
    }
}

/// Runs the suite, optionally restricted by `filter`. `inject_fault` adds a
/// deliberately wrong backward rule to prove the harness catches it.
pub fn run_suite(cfg: &GaldConfig, filter: Option<&str>, inject_fault: bool) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for c in all_cases(cfg, inject_fault) {
        if !selected(&c.name, filter) && !c.name.starts_with("fault/") {
            continue;
        }
        let report = (c.run)()?;
        entries.push(SuiteEntry {
            name: c.name,
            tol: c.tol,
            report,
        });
    }
    let failing: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.pass)
        .map(|e| e.name.clone())
        .collect();
    Ok(SuiteReport {
        pass: failing.is_empty() && !entries.is_empty(),
        checks: entries.len(),
        failing,
        entries,
    })
}
