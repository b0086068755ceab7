//! Context modules and LD against brute-force oracles.

#![allow(clippy::needless_range_loop)]

use gald::context::{cgnl_parts, ga_forward, nonlocal_context, GaKind, GaSpec};
use gald::gald::{arrangement_forward, ld_mask, Arrangement, LdSpec, LdStrategy};
use gald::gradcheck::{weighted_mean, GradcheckOptions};
use gald::nn::{gradcheck_params, Ctx, Init, LayerParams, Mode};
use gald::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Gives every bias random values so no term is trivially zero.
fn randomise_biases(params: &mut LayerParams, seed: u64) {
    let names: Vec<String> = params.names().into_iter().filter(|n| n.ends_with(".bias")).collect();
    for (k, n) in names.iter().enumerate() {
        let shape = params.value(n).unwrap().shape().to_vec();
        params.set(n, random(&shape, seed + k as u64)).unwrap();
    }
}

fn nl_context(params: &mut LayerParams, spec: &GaSpec, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let y = nonlocal_context(&mut ctx, xv, spec, "nl").unwrap();
    tape.value(y).clone()
}

/// `W x + b` at every position of a `C x P` map.
fn project(params: &LayerParams, name: &str, x: &[f64], c: usize, p: usize) -> Vec<Vec<f64>> {
    let w = params.value(&format!("{name}.weight")).unwrap();
    let b = params.value(&format!("{name}.bias")).unwrap();
    let co = w.shape()[0];
    (0..co)
        .map(|o| {
            (0..p)
                .map(|i| b.data()[o] + (0..c).map(|k| w.data()[o * c + k] * x[k * p + i]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn nonlocal_matches_brute_force() {
    let spec = GaSpec::new(GaKind::Nonlocal, 4);
    let x = random(&[1, 4, 3, 3], 1);
    let mut params = LayerParams::new(2);
    nl_context(&mut params, &spec, &x);
    randomise_biases(&mut params, 10);
    let y = nl_context(&mut params, &spec, &x);

    let (c, p, ci) = (4, 9, spec.inner_channels);
    let theta = project(&params, "nl.theta", x.data(), c, p);
    let phi = project(&params, "nl.phi", x.data(), c, p);
    let g = project(&params, "nl.g", x.data(), c, p);
    for i in 0..p {
        let logits: Vec<f64> = (0..p).map(|j| (0..ci).map(|k| theta[k][i] * phi[k][j]).sum()).collect();
        let top = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..ci {
            let expect: f64 = (0..p).map(|j| e[j] / z * g[k][j]).sum();
            assert!((y.data()[k * p + i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn nonlocal_with_zero_embeddings_is_the_mean_of_g() {
    let spec = GaSpec::new(GaKind::Nonlocal, 4);
    let x = random(&[1, 4, 4, 4], 3);
    let mut params = LayerParams::new(4);
    nl_context(&mut params, &spec, &x);
    randomise_biases(&mut params, 20);
    for which in ["theta", "phi"] {
        for part in ["weight", "bias"] {
            params.zero_prefix(&format!("nl.{which}.{part}"));
        }
    }
    let y = nl_context(&mut params, &spec, &x);
    let g = project(&params, "nl.g", x.data(), 4, 16);
    for (k, row) in g.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / 16.0;
        for i in 0..16 {
            assert!((y.data()[k * 16 + i] - mean).abs() < 1e-10);
        }
    }
}

#[test]
fn nonlocal_is_permutation_equivariant() {
    let spec = GaSpec::new(GaKind::Nonlocal, 4);
    let x = random(&[1, 4, 3, 3], 5);
    let perm = [4, 7, 0, 2, 8, 1, 6, 3, 5];
    let xp = Tensor::from_fn(&[1, 4, 3, 3], |i| x.data()[(i / 9) * 9 + perm[i % 9]]);
    let mut params = LayerParams::new(6);
    let y = nl_context(&mut params, &spec, &x);
    let yp = nl_context(&mut params, &spec, &xp);
    let ci = spec.inner_channels;
    for k in 0..ci {
        for i in 0..9 {
            assert!((yp.data()[k * 9 + i] - y.data()[k * 9 + perm[i]]).abs() < 1e-12);
        }
    }
}

#[test]
fn cgnl_associative_form_matches_materialised_affinity() {
    let spec = GaSpec::new(GaKind::Cgnl, 4).groups(2);
    let x = random(&[1, 4, 3, 3], 7);
    let mut params = LayerParams::new(8);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
    let xv = ctx.tape.constant(x);
    let parts = cgnl_parts(&mut ctx, xv, &spec, "cgnl").unwrap();
    let fast = ctx.tape.mul(parts.theta, parts.stats).unwrap();

    let (theta, phi, g) = (tape.value(parts.theta), tape.value(parts.phi), tape.value(parts.g));
    let pg = 18;
    for grp in 0..2 {
        let at = |t: &Tensor, i: usize| t.data()[grp * pg + i];
        for i in 0..pg {
            // row i of (theta phi^T) g, scaled like the statistic
            let slow: f64 = (0..pg).map(|j| at(theta, i) * at(phi, j) * at(g, j)).sum::<f64>() / pg as f64;
            assert!((tape.value(fast).data()[grp * pg + i] - slow).abs() < 1e-10);
        }
    }
}

#[test]
fn cgnl_statistic_is_permutation_invariant() {
    let spec = GaSpec::new(GaKind::Cgnl, 4).groups(2);
    let x = random(&[1, 4, 3, 3], 9);
    let perm = [8, 3, 5, 0, 1, 7, 2, 4, 6];
    let xp = Tensor::from_fn(&[1, 4, 3, 3], |i| x.data()[(i / 9) * 9 + perm[i % 9]]);
    let mut params = LayerParams::new(10);
    let mut stats = |x: &Tensor| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let parts = cgnl_parts(&mut ctx, xv, &spec, "cgnl").unwrap();
        tape.value(parts.stats).clone()
    };
    let (a, b) = (stats(&x), stats(&xp));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn every_ga_kind_keeps_the_shape() {
    let x = random(&[2, 8, 8, 8], 11);
    for kind in GaKind::ALL {
        let spec = GaSpec::new(kind, 8);
        let mut params = LayerParams::new(12);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let y = ga_forward(&mut ctx, xv, &spec, "ga").unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 8, 8], "{kind:?}");
        assert!(tape.value(y).is_finite());
    }
}

#[test]
fn arrangement_widths() {
    let x = random(&[1, 8, 8, 8], 13);
    let ga = GaSpec::new(GaKind::Psp, 8);
    let ld = LdSpec::new(LdStrategy::AvgPool, 2);
    for arr in Arrangement::ALL {
        let mut params = LayerParams::new(14);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let out = arrangement_forward(&mut ctx, xv, arr, &ga, &ld).unwrap();
        assert_eq!(tape.shape(out.features)[1], arr.output_channels(8), "{arr:?}");
        assert_eq!(out.mask.is_some(), arr.has_ld(), "{arr:?}");
    }
}

#[test]
fn cgnl_then_ld_gradcheck() {
    let ga = GaSpec::new(GaKind::Cgnl, 8);
    let ld = LdSpec::new(LdStrategy::DepthwiseStrideConv, 2);
    let mut params = LayerParams::new(15);
    params.insert("input", random(&[1, 8, 6, 6], 16), true);
    let build = |ctx: &mut Ctx<'_>| {
        let x = ctx.param("input", &[1, 8, 6, 6], Init::Zeros)?;
        let out = arrangement_forward(ctx, x, Arrangement::Gald, &ga, &ld)?;
        weighted_mean(ctx.tape, out.features, 17)
    };
    {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        build(&mut ctx).unwrap();
    }
    randomise_biases(&mut params, 30);
    let names = ["input".to_string()];
    let report = gradcheck_params(&params, &names, Mode::Train, &GradcheckOptions::default(), build).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn ld_masks_stay_in_the_open_unit_interval() {
    for strategy in LdStrategy::ALL {
        let spec = LdSpec::new(strategy, 4);
        let mut params = LayerParams::new(18);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        let x = ctx.tape.constant(random(&[2, 4, 8, 8], 19));
        let m = ld_mask(&mut ctx, x, &spec, "ld").unwrap();
        assert_eq!(tape.shape(m), &[2, 4, 8, 8]);
        assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
