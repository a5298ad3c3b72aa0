//! Weight initializers.

use rand::Rng;

use crate::autodiff::Tensor;

/// Slope of the negative half of every leaky-ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Kaiming-uniform bound for a leaky-ReLU layer with `fan_in` inputs.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, kaiming_bound(fan_in), rng)
}

/// Random n×n orthogonal matrix: Gram-Schmidt on a uniform draw.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                rows[i].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor::new(&[n, n], rows.concat()).expect("square");
        }
    }
}
