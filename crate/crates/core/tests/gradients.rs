//! Analytic gradients against central finite differences on a tiny model.

mod common;

use common::*;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semmim::autograd::{Graph, Var};
use semmim::distill::soft_cross_entropy;
use semmim::gradcheck::check_gradients;
use semmim::model::{
    decode_graph, encode_image_graph, encode_text_graph, fuse_graph, FuseOptions, ImageEncodeOptions,
};
use semmim::objectives::LOSS_NAMES;
use semmim::params::{Bound, ParamStore};

#[test]
fn tiny_model_is_under_a_thousand_parameters() {
    let f = GradFixture::new(grad_config(), 1);
    assert!(f.params.numel() <= 1000, "{} parameters", f.params.numel());
}

fn check_part(part: usize) {
    let f = GradFixture::new(grad_config(), 1);
    let r = f.check(Some(part));
    assert!(r.passes(GRAD_TOL), "{}: {r:?}", LOSS_NAMES[part]);
}

#[test]
fn cls_loss_gradient() {
    check_part(0);
}

#[test]
fn patch_loss_gradient() {
    check_part(1);
}

#[test]
fn itc_loss_gradient() {
    check_part(2);
}

#[test]
fn itm_loss_gradient() {
    check_part(3);
}

#[test]
fn mlm_loss_gradient() {
    check_part(4);
}

#[test]
fn plm_loss_gradient() {
    check_part(5);
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let f = GradFixture::new(grad_config(), 2);
    let (total, g_total) = f.loss_and_grad(&f.params, None, true);
    let g_total = g_total.unwrap();
    let mut sum = 0.0;
    let mut acc: Option<ParamStore> = None;
    for part in 0..6 {
        let (v, g) = f.loss_and_grad(&f.params, Some(part), true);
        sum += v;
        let g = g.unwrap();
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (k, t) in g.iter() {
                    *a.tensor_mut(k) += t;
                }
                a
            }
        });
    }
    assert!((total - sum).abs() < 1e-12 * total.abs().max(1.0));
    let acc = acc.unwrap();
    for (k, t) in g_total.iter() {
        let d = (t - acc.get(k).unwrap()).mapv(f64::abs);
        assert!(d.iter().all(|&x| x < 1e-10), "{k}");
    }
    let r = f.check(None);
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

#[test]
fn teacher_receives_no_gradient() {
    // The teacher is held in a separate store and enters only as constants,
    // so nothing on the graph can route gradient into it.
    let f = GradFixture::new(grad_config(), 3);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &f.params, true);
    let t = Bound::new(&mut g, &f.teacher.params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses = semmim::train::build_losses(
        &mut g, &p, &f.cfg, &f.views, &f.tokens, &f.teacher, f.fixed(), &mut rng,
    )
    .unwrap();
    let grads = g.backward(losses.total);
    for (name, _) in f.teacher.params.iter() {
        assert!(grads.get(t.get(name)).is_none(), "{name} received a gradient");
    }
}

/// Fixed random weighting of an output, so the reduction is not symmetric.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = ArrayD::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let y = g.mul(x, w);
    g.sum(y)
}

fn network_check(reduce: impl Fn(&mut Graph, &Bound) -> Var, include: impl Fn(&str) -> bool) {
    let f = GradFixture::new(grad_config(), 4);
    let eval = |ps: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, ps, grad);
        let out = reduce(&mut g, &p);
        let v = g.item(out);
        let gr = grad.then(|| {
            let b = g.backward(out);
            p.gradients(&g, &b, ps)
        });
        (v, gr)
    };
    let (_, grad) = eval(&f.params, true);
    let grad = grad.unwrap();
    let r = check_gradients(&f.params, &grad, |ps| Ok(eval(ps, false).0), GRAD_STEP, GRAD_FLOOR, include)
        .unwrap();
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

#[test]
fn image_encoder_gradient_with_text_and_mask() {
    let f = GradFixture::new(grad_config(), 4);
    network_check(
        |g, p| {
            let text = encode_text_graph(g, p, &f.cfg, &f.tokens).unwrap();
            let out = encode_image_graph(
                g,
                p,
                &f.cfg,
                &f.views.view1,
                ImageEncodeOptions {
                    text: Some(&text),
                    mask: Some(&f.masks),
                    taps: None,
                },
            )
            .unwrap();
            weighted_sum(g, out.var, 10)
        },
        |n| n.starts_with("image.") || n.starts_with("text."),
    );
}

#[test]
fn fusion_and_decoder_gradient() {
    let f = GradFixture::new(grad_config(), 4);
    network_check(
        |g, p| {
            let text = encode_text_graph(g, p, &f.cfg, &f.tokens).unwrap();
            let image = encode_image_graph(g, p, &f.cfg, &f.views.view2, ImageEncodeOptions::default()).unwrap();
            let fused = fuse_graph(g, p, &f.cfg, &image, &text, FuseOptions::default()).unwrap();
            let a = weighted_sum(g, fused.var, 11);
            let logits = decode_graph(g, p, &f.cfg, &fused, &f.tokens).unwrap();
            let b = weighted_sum(g, logits, 12);
            g.add(a, b)
        },
        |_| true,
    );
}

#[test]
fn agreement_loss_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, s, k) = (2, 3, 5);
    let logits0 = ArrayD::from_shape_simple_fn(vec![b, s, k], || rng.random_range(-1.0..1.0));
    let mut targets = ndarray::Array3::from_shape_simple_fn((b, s, k), || rng.random_range(0.1..1.0));
    for mut lane in targets.lanes_mut(ndarray::Axis(2)) {
        let z = lane.sum();
        lane /= z;
    }
    let weights = ndarray::Array2::from_elem((b, s), 1.0 / (b * s) as f64);
    let mut params = ParamStore::new();
    params.insert("logits", logits0);
    let eval = |ps: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, ps, grad);
        let l = soft_cross_entropy(&mut g, p.get("logits"), 0.1, &targets, &weights);
        let v = g.item(l);
        let gr = grad.then(|| {
            let bw = g.backward(l);
            p.gradients(&g, &bw, ps)
        });
        (v, gr)
    };
    let (_, grad) = eval(&params, true);
    let r = check_gradients(&params, &grad.unwrap(), |ps| Ok(eval(ps, false).0), GRAD_STEP, GRAD_FLOOR, |_| true).unwrap();
    assert!(r.passes(GRAD_TOL), "{r:?}");
}

