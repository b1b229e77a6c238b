//! Full-model gradient integrity: every trainable parameter's analytic
//! gradient against central finite differences on the 4-node toy model, for
//! the combined loss (prediction + Kirchhoff at ν = 1).

use pidgeun::graph::{build_adjacency, tune_scaling_k, BusType, PowerGraph};
use pidgeun::loss::{kirchhoff_loss_on_tape, prediction_loss_on_tape};
use pidgeun::model::{
    GraphContext, ModelConfig, PidgeunModel, SnapshotWindow, OUTPUT_DIM, STATE_DIM,
};
use pidgeun::oracles::finite_difference_gradient;
use pidgeun::tensor::{Mode, Tape};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_graph() -> PowerGraph {
    let n = 4;
    let mut y = vec![Complex64::new(0.0, 0.0); n * n];
    let lines = [
        (0usize, 1usize, 1.0, -0.5),
        (1, 2, 0.7, 0.3),
        (2, 3, 1.2, 0.1),
        (3, 0, 0.5, -0.8),
    ];
    let mut edges = Vec::new();
    for &(i, j, re, im) in &lines {
        let v = Complex64::new(re, im);
        y[i * n + j] = v;
        y[j * n + i] = v;
        edges.push((i, j));
    }
    PowerGraph::new(n, &edges, y, vec![BusType::Load; n]).unwrap()
}

fn toy_model() -> PidgeunModel {
    PidgeunModel::new(
        ModelConfig {
            n_mlp_layers: 2,
            n_gal: 1,
            n_gcl: 1,
            cheb_order: 2,
            hidden_size: 8,
            input_steps: 2,
            attention_heads: 2,
        },
        1234,
    )
    .unwrap()
}

/// Loss of the model at the given parameter assignment: two teacher-forced
/// steps of prediction loss plus the Kirchhoff loss of the integrated next
/// state.
fn loss_of(
    model: &PidgeunModel,
    ctx: &GraphContext,
    windows: &[SnapshotWindow],
    targets: &[Vec<f64>],
    currents: &[Vec<f64>],
    dt: f64,
) -> f64 {
    let mut tape = Tape::new();
    let mut total = None;
    for ((window, target), current) in windows.iter().zip(targets).zip(currents) {
        let out = model
            .forward(&mut tape, window, ctx, Mode::Train, None)
            .unwrap();
        let t = tape.leaf(target.clone(), vec![ctx.n, OUTPUT_DIM]).unwrap();
        let l1 = prediction_loss_on_tape(&mut tape, &out.rates, &t).unwrap();
        let cur = tape.leaf(current.clone(), vec![ctx.n, OUTPUT_DIM]).unwrap();
        let scaled = tape.scalar_mul(&out.rates, dt).unwrap();
        let next = tape.add(&cur, &scaled).unwrap();
        let l2 = kirchhoff_loss_on_tape(&mut tape, &next).unwrap();
        let both = tape.add(&l1, &l2).unwrap();
        total = Some(match total {
            None => both,
            Some(acc) => tape.add(&acc, &both).unwrap(),
        });
    }
    total.unwrap().item()
}

#[test]
fn every_parameter_matches_finite_differences() {
    let g = toy_graph();
    let k = tune_scaling_k(&g);
    let adj = build_adjacency(&g, k).unwrap();
    let ctx = GraphContext::new(&g, adj).unwrap();
    let mut model = toy_model();
    let dt = 0.05;

    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut rand_step = || -> Vec<f64> {
        (0..4 * STATE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect()
    };
    let steps: Vec<Vec<f64>> = (0..3).map(|_| rand_step()).collect();
    let windows = vec![
        SnapshotWindow::from_steps(&[&steps[1], &steps[0]], 4).unwrap(),
        SnapshotWindow::from_steps(&[&steps[2], &steps[1]], 4).unwrap(),
    ];
    let targets: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..4 * OUTPUT_DIM).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let currents: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..4 * OUTPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    // Analytic gradients from one taped pass.
    let analytic = {
        let mut tape = Tape::new();
        let mut total = None;
        for ((window, target), current) in windows.iter().zip(&targets).zip(&currents) {
            let out = model
                .forward(&mut tape, window, &ctx, Mode::Train, None)
                .unwrap();
            let t = tape.leaf(target.clone(), vec![4, OUTPUT_DIM]).unwrap();
            let l1 = prediction_loss_on_tape(&mut tape, &out.rates, &t).unwrap();
            let cur = tape.leaf(current.clone(), vec![4, OUTPUT_DIM]).unwrap();
            let scaled = tape.scalar_mul(&out.rates, dt).unwrap();
            let next = tape.add(&cur, &scaled).unwrap();
            let l2 = kirchhoff_loss_on_tape(&mut tape, &next).unwrap();
            let both = tape.add(&l1, &l2).unwrap();
            total = Some(match total {
                None => both,
                Some(acc) => tape.add(&acc, &both).unwrap(),
            });
        }
        tape.backward(&total.unwrap()).unwrap()
    };

    let param_names: Vec<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    let mut checked = 0usize;
    for name in &param_names {
        let values = {
            let p = model
                .parameters()
                .into_iter()
                .find(|p| &p.name == name)
                .unwrap();
            p.value.clone()
        };
        let fd = finite_difference_gradient(
            |x| {
                for p in model.parameters_mut() {
                    if &p.name == name {
                        p.value.copy_from_slice(x);
                    }
                }
                loss_of(&model, &ctx, &windows, &targets, &currents, dt)
            },
            &values,
            1e-6,
        );
        // Restore the original values.
        for p in model.parameters_mut() {
            if &p.name == name {
                p.value.copy_from_slice(&values);
            }
        }
        let got = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        for (i, (a, b)) in got.iter().zip(&fd).enumerate() {
            let tol = 1e-4 * a.abs().max(b.abs()) + 1e-7;
            assert!(
                (a - b).abs() <= tol,
                "{name}[{i}]: analytic {a} vs finite-difference {b}"
            );
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} scalars checked");
}
