mod common;

use common::*;
use lowrank_core::allocation::{
    allocate_uniform, generate_candidates, grid_search, AllocationConfig,
};
use lowrank_core::faer::Mat;
use lowrank_core::model::{calibrate, evaluate, ModelMetadata};
use lowrank_core::{Activation, ActivationBatch, Compressor, Layer, ModelBundle, WeightMatrix};

fn toy(seed: u64, dim: usize, layers: usize) -> ModelBundle {
    let mut r = rng(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let layers = (0..layers)
        .map(|_| {
            let up = WeightMatrix::new("up", gaussian(&mut r, dim, 2 * dim) * scale).unwrap();
            let down = WeightMatrix::new("down", gaussian(&mut r, 2 * dim, dim) * scale).unwrap();
            Layer::new(vec![up, down], Activation::Relu, true).unwrap()
        })
        .collect();
    ModelBundle::new(layers, ModelMetadata::default()).unwrap()
}

fn data(seed: u64, batches: usize, rows: usize, dim: usize) -> Vec<ActivationBatch> {
    let mut r = rng(seed);
    (0..batches)
        .map(|_| ActivationBatch::new(gaussian(&mut r, rows, dim)).unwrap())
        .collect()
}

/// Inputs seen by every module, replayed by hand.
fn module_inputs(model: &ModelBundle, batches: &[ActivationBatch]) -> Vec<Mat<f64>> {
    let mut inputs: Vec<Vec<Mat<f64>>> = vec![Vec::new(); model.matrix_count()];
    for b in batches {
        let mut h = b.matrix().to_owned();
        let mut slot = 0;
        for layer in model.layers() {
            let mut z = h.clone();
            for w in layer.modules() {
                inputs[slot].push(z.clone());
                let mut y = &z * w.matrix();
                for j in 0..y.ncols() {
                    for i in 0..y.nrows() {
                        y[(i, j)] = y[(i, j)].max(0.0);
                    }
                }
                z = y;
                slot += 1;
            }
            h = z + &h;
        }
    }
    inputs
        .into_iter()
        .map(|parts| {
            let rows: usize = parts.iter().map(|p| p.nrows()).sum();
            let cols = parts[0].ncols();
            let mut out = Mat::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                out.as_mut().subrows_mut(at, p.nrows()).copy_from(&p);
                at += p.nrows();
            }
            out
        })
        .collect()
}

#[test]
fn compressed_residuals_match_reported_losses() {
    let model = toy(1, 16, 3);
    let calib = data(2, 8, 24, 16);
    let run = calibrate(&model, &mut calib.clone().into_iter().fuse(), calib.len()).unwrap();
    let mut comp = Compressor::new(run);
    let stats = comp.layer_stats().unwrap();
    let alloc = allocate_uniform(&stats, &AllocationConfig::new(0.6)).unwrap();
    let bundle = comp.compress(&model, &alloc).unwrap();
    let inputs = module_inputs(&model, &calib);
    for ((module, (_, w)), x) in bundle.modules().zip(model.matrices()).zip(&inputs) {
        let y = x * w.matrix();
        let approx = module.factors.apply(x.as_ref()).unwrap();
        let residual = fro_diff(&y, &approx);
        assert!(
            (residual - module.loss).abs() <= 1e-8 * module.loss,
            "{}: {residual} vs {}",
            module.id,
            module.loss
        );
    }
}

#[test]
fn error_grows_as_ratio_shrinks_and_spectra_are_reused() {
    let model = toy(3, 16, 4);
    let calib = data(4, 16, 32, 16);
    let val = data(5, 4, 32, 16);
    let run = calibrate(&model, &mut calib.into_iter().fuse(), 16).unwrap();
    let mut comp = Compressor::new(run);
    let stats = comp.layer_stats().unwrap();
    let mut errors = Vec::new();
    for ratio in [0.2, 0.4, 0.6, 0.8] {
        let alloc = allocate_uniform(&stats, &AllocationConfig::new(ratio)).unwrap();
        errors.push(evaluate(&model, &comp.compress(&model, &alloc).unwrap(), &val).unwrap());
    }
    assert!(errors.windows(2).all(|w| w[0] >= w[1]), "{errors:?}");
    assert_eq!(comp.decompositions(), model.matrix_count());
}

#[test]
fn grid_search_never_loses_to_uniform() {
    let model = toy(6, 12, 4);
    let calib = data(7, 12, 24, 12);
    let val = data(8, 4, 24, 12);
    let run = calibrate(&model, &mut calib.into_iter().fuse(), 12).unwrap();
    let mut comp = Compressor::new(run);
    let stats = comp.layer_stats().unwrap();
    let cands = generate_candidates(&stats, &AllocationConfig::new(0.5)).unwrap();
    let outcome = grid_search(&cands, |a| {
        let b = comp.compress(&model, a)?;
        evaluate(&model, &b, &val)
    })
    .unwrap();
    let uniform = outcome.scores.last().unwrap().score;
    assert!(outcome.selected_score() <= uniform);
    assert!(outcome.scores.iter().all(|c| c.failure.is_none()));
}
