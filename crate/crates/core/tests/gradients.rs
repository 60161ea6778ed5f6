//! Analytic gradients against central finite differences for every
//! operator and loss, alone and composed through the model.

mod common;

use std::collections::BTreeMap;

use mmfa_core::diffcore::ops::ConvGeometry;
use mmfa_core::diffcore::{
    finite_difference_check, CheckOptions, CheckReport, LayerSpec, Mode, ParameterSet, Sequential,
    Tape, Var,
};
use mmfa_core::losses::{
    adversarial_loss, domain_discrimination_loss, identity_loss, reconstruction_loss,
    triplet_loss_batch_hard, Loss,
};
use mmfa_core::mmd::{multi_domain_mmd_rows, KernelSpec, MmdForm};
use mmfa_core::train::{gradient_check_suite, TrainConfig};
use mmfa_core::{Result, Tensor};
use rand::Rng;

fn tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn params(entries: Vec<(&str, Tensor)>) -> ParameterSet {
    let mut ps = ParameterSet::new();
    for (k, v) in entries {
        ps.insert(k, v);
    }
    ps
}

/// Check `Σ c ⊙ f(params)` for fixed random `c`, so every output
/// coordinate contributes with a distinct weight.
fn check_op(
    ps: ParameterSet,
    f: impl Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
) -> CheckReport {
    let loss_fn = |p: &ParameterSet| {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = p
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect();
        let y = f(&mut tape, &vars)?;
        let out = tape.value(y).clone();
        let c = tensor(&mut common::rng(99), out.shape(), -1.0, 1.0);
        let value: f64 = out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let loss = tape.scalar(value, vec![(y, c)])?;
        Ok((value, tape.gradient(loss)?.into_params()))
    };
    finite_difference_check(&ps, loss_fn, CheckOptions::default()).unwrap()
}

fn check_loss(x: Tensor, f: impl Fn(&Tensor) -> Result<Loss>) -> CheckReport {
    let loss_fn = |p: &ParameterSet| {
        let l = f(p.get("x")?)?;
        Ok((l.value, BTreeMap::from([("x".to_string(), l.grad)])))
    };
    finite_difference_check(&params(vec![("x", x)]), loss_fn, CheckOptions::default()).unwrap()
}

fn assert_pass(name: &str, r: &CheckReport) {
    assert!(r.passed(), "{name}\n{r}");
}

#[test]
fn dense_with_bias() {
    let mut g = common::rng(1);
    let ps = params(vec![
        ("x", tensor(&mut g, &[4, 3], -1.0, 1.0)),
        ("w", tensor(&mut g, &[5, 3], -1.0, 1.0)),
        ("b", tensor(&mut g, &[5], -1.0, 1.0)),
    ]);
    assert_pass(
        "dense",
        &check_op(ps, |t, v| t.dense(v["x"], v["w"], Some(v["b"]))),
    );
}

#[test]
fn conv2d_strided_and_padded() {
    let mut g = common::rng(2);
    let ps = params(vec![
        ("x", tensor(&mut g, &[2, 2, 5, 5], -1.0, 1.0)),
        ("w", tensor(&mut g, &[3, 2, 3, 3], -1.0, 1.0)),
        ("b", tensor(&mut g, &[3], -1.0, 1.0)),
    ]);
    let geo = ConvGeometry {
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    assert_pass(
        "conv2d",
        &check_op(ps, |t, v| t.conv2d(v["x"], v["w"], Some(v["b"]), geo)),
    );
}

#[test]
fn relu_away_from_the_kink() {
    let mut g = common::rng(3);
    let x: Vec<f64> = (0..12)
        .map(|i| {
            if i % 2 == 0 {
                g.random_range(0.1..1.0)
            } else {
                g.random_range(-1.0..-0.1)
            }
        })
        .collect();
    let ps = params(vec![("x", Tensor::new(vec![3, 4], x).unwrap())]);
    assert_pass("relu", &check_op(ps, |t, v| t.relu(v["x"])));
}

#[test]
fn instance_norm_vector_and_image_layouts() {
    let mut g = common::rng(4);
    let ps = params(vec![
        ("x", tensor(&mut g, &[3, 6], -2.0, 2.0)),
        ("g", tensor(&mut g, &[6], 0.5, 1.5)),
        ("b", tensor(&mut g, &[6], -1.0, 1.0)),
    ]);
    assert_pass(
        "instance norm [n, d]",
        &check_op(ps, |t, v| {
            t.instance_norm(v["x"], Some((v["g"], v["b"])), 1e-5)
        }),
    );
    let ps = params(vec![
        ("x", tensor(&mut g, &[2, 3, 2, 2], -2.0, 2.0)),
        ("g", tensor(&mut g, &[3], 0.5, 1.5)),
        ("b", tensor(&mut g, &[3], -1.0, 1.0)),
    ]);
    assert_pass(
        "instance norm [n, c, h, w]",
        &check_op(ps, |t, v| {
            t.instance_norm(v["x"], Some((v["g"], v["b"])), 1e-5)
        }),
    );
    let ps = params(vec![("x", tensor(&mut g, &[3, 5], -2.0, 2.0))]);
    assert_pass(
        "instance norm without affine",
        &check_op(ps, |t, v| t.instance_norm(v["x"], None, 1e-5)),
    );
}

#[test]
fn batch_norm_train_and_eval() {
    let mut g = common::rng(5);
    let ps = params(vec![
        ("x", tensor(&mut g, &[5, 4], -2.0, 2.0)),
        ("g", tensor(&mut g, &[4], 0.5, 1.5)),
        ("b", tensor(&mut g, &[4], -1.0, 1.0)),
    ]);
    assert_pass(
        "batch norm train",
        &check_op(ps.clone(), |t, v| {
            Ok(t.batch_norm(v["x"], v["g"], v["b"], 1e-5)?.0)
        }),
    );
    let ps4 = params(vec![
        ("x", tensor(&mut g, &[3, 2, 2, 2], -2.0, 2.0)),
        ("g", tensor(&mut g, &[2], 0.5, 1.5)),
        ("b", tensor(&mut g, &[2], -1.0, 1.0)),
    ]);
    assert_pass(
        "batch norm train image",
        &check_op(ps4, |t, v| {
            Ok(t.batch_norm(v["x"], v["g"], v["b"], 1e-5)?.0)
        }),
    );
    let stats = {
        let mut t = Tape::new();
        let x = t.constant(tensor(&mut g, &[6, 4], -1.0, 1.0));
        let (gm, bt) = (
            t.constant(Tensor::full(&[4], 1.0)),
            t.constant(Tensor::zeros(&[4])),
        );
        t.batch_norm(x, gm, bt, 1e-5).unwrap().1
    };
    assert_pass(
        "batch norm eval",
        &check_op(ps, |t, v| {
            t.batch_norm_eval(v["x"], v["g"], v["b"], &stats, 1e-5)
        }),
    );
}

#[test]
fn global_average_pool() {
    let mut g = common::rng(6);
    let ps = params(vec![("x", tensor(&mut g, &[2, 3, 3, 2], -1.0, 1.0))]);
    assert_pass(
        "global average pool",
        &check_op(ps, |t, v| t.global_avg_pool(v["x"])),
    );
}

#[test]
fn layer_stack_in_both_modes() {
    let spec = vec![
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
        LayerSpec::InstanceNorm {
            features: 3,
            eps: 1e-5,
            affine: true,
        },
        LayerSpec::BatchNorm {
            channels: 3,
            eps: 1e-5,
            momentum: 0.9,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            inputs: 3,
            outputs: 2,
            bias: true,
        },
    ];
    let net = Sequential::new("net", spec).unwrap();
    let mut g = common::rng(7);
    let mut ps = net.init(&mut g);
    let x = tensor(&mut g, &[3, 2, 4, 4], -1.0, 1.0);
    let (_, updates) = net.apply(&ps, &x, Mode::Train).unwrap();
    ps.apply_stat_updates(&updates).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let loss_fn = |p: &ParameterSet| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (y, _) = net.record(&mut tape, p, xv, mode, true)?;
            let out = tape.value(y).clone();
            let value = out
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v)
                .sum();
            let c = Tensor::new(
                out.shape().to_vec(),
                (0..out.len()).map(|i| i as f64 + 1.0).collect(),
            )?;
            let loss = tape.scalar(value, vec![(y, c)])?;
            Ok((value, tape.gradient(loss)?.into_params()))
        };
        let r = finite_difference_check(&ps, loss_fn, CheckOptions::default()).unwrap();
        assert_pass(&format!("stack {mode:?}"), &r);
    }
}

#[test]
fn classification_losses() {
    let mut g = common::rng(8);
    let logits = tensor(&mut g, &[6, 4], -2.0, 2.0);
    let labels = [0, 1, 2, 3, 1, 0];
    assert_pass(
        "identity",
        &check_loss(logits.clone(), |x| identity_loss(x, &labels)),
    );
    let domains = [0, 1, 2, 0, 1, 2];
    let dl = tensor(&mut g, &[6, 3], -2.0, 2.0);
    assert_pass(
        "discrimination",
        &check_loss(dl.clone(), |x| domain_discrimination_loss(x, &domains)),
    );
    assert_pass(
        "adversarial",
        &check_loss(dl, |x| adversarial_loss(x, &domains)),
    );
}

#[test]
fn metric_losses() {
    let mut g = common::rng(9);
    let codes = tensor(&mut g, &[8, 3], -1.0, 1.0);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    // A large margin keeps every hinge active, away from its kink.
    assert_pass(
        "triplet",
        &check_loss(codes.clone(), |x| triplet_loss_batch_hard(x, &labels, 5.0)),
    );
    let target = tensor(&mut g, &[8, 3], -1.0, 1.0);
    assert_pass(
        "reconstruction",
        &check_loss(codes.clone(), |x| reconstruction_loss(&target, x)),
    );
    let domains = [0, 1, 2, 0, 1, 2, 0, 1];
    for form in [MmdForm::Squared, MmdForm::Root] {
        let r = check_loss(codes.clone(), |x| {
            multi_domain_mmd_rows(x, &domains, &KernelSpec::default(), form)
        });
        assert_pass(&format!("mmd {form:?}"), &r);
    }
}

#[test]
fn every_loss_through_the_micro_model() {
    for seed in 0..3 {
        for (name, r) in
            gradient_check_suite(&TrainConfig::default(), seed, CheckOptions::default()).unwrap()
        {
            assert_pass(&format!("{name} (seed {seed})"), &r);
        }
    }
}
