//! Fixtures shared by the benchmarks: untrained models at benchmark sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbn_core::bridge::{build_schedule, ScheduleShape, TemperatureLaw};
use dbn_core::inference::{Bridge, DbnPredictor};
use dbn_core::nn::Matrix;
use dbn_core::score::{ScoreArch, ScoreNetwork};
use dbn_core::teacher::{ClassifierArch, ClassifierModel, EnsembleBundle};

pub const INPUT: usize = 10;
pub const CLASSES: usize = 2;

pub fn arch() -> ClassifierArch {
    ClassifierArch::mlp(INPUT, vec![64, 64, 64], CLASSES)
}

pub fn inputs(rows: usize, seed: u64) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * INPUT).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::from_vec(rows, INPUT, data).expect("shape")
}

pub fn bundle(members: usize) -> EnsembleBundle {
    let models = (0..members as u64)
        .map(|s| ClassifierModel::new(arch(), s + 1).expect("valid arch"))
        .collect();
    EnsembleBundle::new(models, 0, vec![0.0; members]).expect("bundle")
}

pub fn bridge(steps: usize, seed: u64) -> Bridge {
    let a = arch();
    Bridge {
        net: ScoreNetwork::new(ScoreArch::new(a.feature_width(), CLASSES), seed).expect("score arch"),
        schedule: build_schedule(steps, ScheduleShape::SymmetricTriangular, 0.3).expect("schedule"),
        teacher_indices: vec![0, 1, 2],
        source_index: 0,
        ema: true,
        temperature: TemperatureLaw::default(),
        lineage: Vec::new(),
    }
}

pub fn predictor(bundle: &EnsembleBundle, bridges: usize, steps: usize) -> DbnPredictor {
    let b = (0..bridges as u64).map(|s| bridge(steps, s)).collect();
    DbnPredictor::from_bundle(bundle, b).expect("predictor")
}
