#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ubgan::nnengine::Tensor;
use ubgan::{Generator, GeneratorConfig, Mode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// A model whose output layers are not zero, so generated bands carry
/// signal. Output projections are drawn in +-0.3 and every bias and shift
/// gets an offset in +-0.2.
pub fn active_model(mode: Mode, seed: u64) -> Generator {
    let mut m = Generator::init(GeneratorConfig::new(mode), seed).unwrap();
    let mut r = rng(seed ^ 0xacce);
    let names: Vec<String> = m.store.tensors.keys().cloned().collect();
    for name in names {
        let out = matches!(name.as_str(), "post.pw" | "post.b" | "comp.conv2.w");
        let offset = name.ends_with(".b") || name.ends_with(".shift");
        if !out && !offset {
            continue;
        }
        let t = m.store.get(&name).unwrap().as_ref().clone();
        let data = t
            .data
            .iter()
            .map(|&v| if out { r.gen_range(-0.3f32..0.3) } else { v + r.gen_range(-0.2f32..0.2) })
            .collect();
        m.store.insert(name, Tensor::new(t.shape.clone(), data).unwrap());
    }
    m
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum()
}
