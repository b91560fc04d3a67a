use crate::tensor::Tensor;

/// Static positional table: `PE[p, 2i] = sin(p / 10000^(2i/C))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/C))`.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0f32; rows * dim];
    for p in 0..rows {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            data[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::new(data, &[rows, dim]).expect("table shape")
}

/// Sinusoidal features of diffusion timesteps, `[B, dim]`: the first half are
/// sines, the second half cosines, over geometrically spaced frequencies.
pub fn timestep_features(timesteps: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; timesteps.len() * dim];
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            data[b * dim + i] = a.sin() as f32;
            data[b * dim + half + i] = a.cos() as f32;
        }
    }
    Tensor::new(data, &[timesteps.len(), dim]).expect("feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_zero_is_sin0_cos0() {
        let pe = sinusoidal_table(4, 6).to_vec();
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn first_slot_of_row_one_is_sin_one() {
        let pe = sinusoidal_table(2, 4).to_vec();
        assert!((pe[4] - 0.841471).abs() < 1e-6);
        // i = 1 slot pair uses 10000^(2/4) = 100
        assert!((pe[6] - (0.01f64).sin() as f32).abs() < 1e-7);
        assert!((pe[7] - (0.01f64).cos() as f32).abs() < 1e-7);
    }

    #[test]
    fn table_is_byte_stable() {
        assert!(sinusoidal_table(8, 32).bit_eq(&sinusoidal_table(8, 32)));
    }
}
