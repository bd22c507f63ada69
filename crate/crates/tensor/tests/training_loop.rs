use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssnav_tensor::nn::{lstm_cell, self_attention, AttentionParams, Linear, LstmParams};
use ssnav_tensor::{clip_global_norm, Checkpoint, Graph, Optimizer, OptimizerKind, ParamStore, Tensor, Var};

const ROWS: usize = 4;
const D: usize = 3;
const H: usize = 5;

fn store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for name in ["q", "k", "v"] {
        s.init_uniform(name, &[D, D], D, &mut rng).unwrap();
    }
    s.init_uniform("o", &[D, D], D, &mut rng).unwrap();
    s.init_uniform("lstm.w", &[ROWS * D + H, 4 * H], ROWS * D, &mut rng).unwrap();
    s.init_uniform("lstm.b", &[4 * H], H, &mut rng).unwrap();
    s.init_uniform("head.w", &[H, 1], H, &mut rng).unwrap();
    s.init_uniform("head.b", &[1], H, &mut rng).unwrap();
    s
}

/// Attention over rows, flatten, two LSTM steps, linear head, squared error.
fn loss(g: &mut Graph, p: &[Var], xs: &[Tensor], target: f64) -> Var {
    let attn = AttentionParams {
        query: p[0],
        key: p[1],
        value: p[2],
        output: p[3],
    };
    let lstm = LstmParams {
        weight: p[4],
        bias: p[5],
    };
    let head = Linear {
        weight: p[6],
        bias: Some(p[7]),
    };
    let mut h = g.constant(Tensor::zeros(&[1, H]));
    let mut c = g.constant(Tensor::zeros(&[1, H]));
    for x in xs {
        let xv = g.constant(x.clone());
        let a = self_attention(g, xv, &attn).unwrap();
        let flat = g.reshape(a.output, &[1, ROWS * D]).unwrap();
        (h, c) = lstm_cell(g, flat, h, c, &lstm).unwrap();
    }
    let y = head.forward(g, h).unwrap();
    let err = g.add_scalar(y, -target);
    let sq = g.mul(err, err).unwrap();
    g.sum(sq)
}

fn inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| Tensor::matrix(ROWS, D, (0..ROWS * D).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn value(p: &ParamStore, xs: &[Tensor], target: f64) -> f64 {
    let mut g = Graph::new();
    let vars = p.bind_frozen(&mut g);
    let l = loss(&mut g, &vars, xs, target);
    g.value(l).item()
}

#[test]
fn composite_gradients_match_central_differences() {
    let p = store(1);
    let xs = inputs(2);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let l = loss(&mut g, &vars, &xs, 0.7);
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.tensor(&g, v);
        let name = p.by_index(i).0.to_string();
        for j in 0..analytic.len() {
            let mut up = p.clone();
            let mut down = p.clone();
            up.get_mut(&name).unwrap().data_mut()[j] += h;
            down.get_mut(&name).unwrap().data_mut()[j] -= h;
            let numeric = (value(&up, &xs, 0.7) - value(&down, &xs, 0.7)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!(
                (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                "{name}[{j}]: {a} vs {numeric}"
            );
        }
    }
}

#[test]
fn adam_with_clipping_fits_a_target_and_checkpoints_resume() {
    let mut p = store(3);
    let mut opt = Optimizer::new(OptimizerKind::adam(), &p);
    let data: Vec<(Vec<Tensor>, f64)> = (0..4).map(|i| (inputs(10 + i), [0.5, -0.3, 0.1, 0.8][i as usize])).collect();
    let total = |p: &ParamStore| data.iter().map(|(xs, t)| value(p, xs, *t)).sum::<f64>();
    let before = total(&p);
    let step = |p: &mut ParamStore, opt: &mut Optimizer| {
        for (xs, t) in &data {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let l = loss(&mut g, &vars, xs, *t);
            let grads = g.backward(l).unwrap();
            let mut gs: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&g, v)).collect();
            clip_global_norm(&mut gs, 1.0);
            opt.apply_update(p, &gs, 0.01).unwrap();
        }
    };
    for _ in 0..150 {
        step(&mut p, &mut opt);
    }
    let after = total(&p);
    assert!(after < 0.05 * before, "loss {before} -> {after}");
    assert_eq!(p.version(), 600);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.txt");
    let mut meta = indexmap::IndexMap::new();
    meta.insert("note".into(), "resume test".into());
    Checkpoint {
        meta,
        params: p.clone(),
        optimizer: Some(opt.clone()),
    }
    .save(&path)
    .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, p);
    let (mut p2, mut opt2) = (loaded.params, loaded.optimizer.unwrap());
    step(&mut p, &mut opt);
    step(&mut p2, &mut opt2);
    assert_eq!(p, p2, "resumed training is bit-identical");
}
