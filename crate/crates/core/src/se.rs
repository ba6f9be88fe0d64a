//! Squeeze-and-Excitation: global-pool squeeze, two-FC excitation with
//! reduction ratio r, and per-channel rescaling.

use crate::error::{Result, SeidError};
use crate::init::he_normal;
use crate::layers::PoolSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bottleneck width of the excitation pair: ceil(C / r).
pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction)
}

/// Exact parameter count: 2 * C * ceil(C/r) weights + ceil(C/r) + C biases.
pub fn se_param_count(channels: usize, reduction: usize) -> usize {
    let cr = bottleneck_width(channels, reduction);
    2 * channels * cr + cr + channels
}

/// Owned SE parameters. W1 maps C -> C/r, W2 maps C/r -> C; both FC layers
/// carry biases, initialized to zero so initial gates sit at sigmoid(0) = 0.5.
#[derive(Debug, Clone)]
pub struct SEParams {
    pub channels: usize,
    pub reduction: usize,
    /// (C/r) x C
    pub w1: Tensor,
    pub b1: Tensor,
    /// C x (C/r)
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SEParams {
    pub fn init(channels: usize, reduction: usize, seed: u64, name: &str) -> Result<Self> {
        if reduction == 0 || channels == 0 {
            return Err(SeidError::config(format!(
                "se: channels {channels} and reduction {reduction} must be positive"
            )));
        }
        let cr = bottleneck_width(channels, reduction);
        Ok(SEParams {
            channels,
            reduction,
            w1: he_normal(&[cr, channels], channels, seed, &format!("{name}.w1")),
            b1: Tensor::zeros(&[cr]),
            w2: he_normal(&[channels, cr], cr, seed, &format!("{name}.w2")),
            b2: Tensor::zeros(&[channels]),
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let cr = bottleneck_width(channels, reduction);
        SEParams {
            channels,
            reduction,
            w1: Tensor::zeros(&[cr, channels]),
            b1: Tensor::zeros(&[cr]),
            w2: Tensor::zeros(&[channels, cr]),
            b2: Tensor::zeros(&[channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.elem_count() + self.b1.elem_count() + self.w2.elem_count() + self.b2.elem_count()
    }

    pub fn as_vars(&self, tape: &mut Tape, requires_grad: bool) -> SeVars {
        SeVars {
            w1: tape.leaf(self.w1.clone(), requires_grad),
            b1: tape.leaf(self.b1.clone(), requires_grad),
            w2: tape.leaf(self.w2.clone(), requires_grad),
            b2: tape.leaf(self.b2.clone(), requires_grad),
        }
    }
}

/// SE parameters already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// z[n][c] = spatial mean of channel c of sample n.
pub fn squeeze(tape: &mut Tape, u: Var) -> Result<Var> {
    let dims = tape.value(u).shape.dims().to_vec();
    if dims.len() != 4 {
        return Err(SeidError::shape(format!(
            "squeeze expects N x C x H x W input, got {}",
            tape.value(u).shape
        )));
    }
    let pooled = tape.pool2d(u, PoolSpec::global_average())?;
    tape.reshape(pooled, &[dims[0], dims[1]])
}

/// s = sigmoid(W2 relu(W1 z + b1) + b2), entries strictly in (0, 1).
pub fn excite(tape: &mut Tape, z: Var, p: &SeVars) -> Result<Var> {
    let hidden = tape.matmul_bt(z, p.w1)?;
    let hidden = tape.add(hidden, p.b1)?;
    let hidden = tape.relu(hidden);
    let gates = tape.matmul_bt(hidden, p.w2)?;
    let gates = tape.add(gates, p.b2)?;
    Ok(tape.sigmoid(gates))
}

/// out[n][c][i][j] = s[n][c] * u[n][c][i][j]
pub fn se_scale(tape: &mut Tape, u: Var, s: Var) -> Result<Var> {
    tape.mul(u, s)
}

/// Full unit: scale(u, excite(squeeze(u))). `gate_override` replaces the
/// computed gates with a constant (1.0 reproduces the SE-free network
/// bit-exactly).
pub fn se_forward(
    tape: &mut Tape,
    u: Var,
    p: Option<&SeVars>,
    gate_override: Option<f64>,
) -> Result<Var> {
    match (gate_override, p) {
        (Some(g), _) => {
            let dims = tape.value(u).shape.dims().to_vec();
            let gates = tape.constant(Tensor::full(&[dims[0], dims[1]], g));
            se_scale(tape, u, gates)
        }
        (None, Some(p)) => {
            let z = squeeze(tape, u)?;
            let s = excite(tape, z, p)?;
            se_scale(tape, u, s)
        }
        (None, None) => Err(SeidError::contract(
            "se_forward: parameters required unless the gate is overridden".to_string(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squeeze_constant_channel() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 2, 3, 3], 2.0));
        let z = squeeze(&mut tape, u).unwrap();
        assert_eq!(tape.value(z).shape.dims(), &[1, 2]);
        assert_eq!(tape.value(z).data, vec![2.0, 2.0]);
    }

    #[test]
    fn squeeze_is_arithmetic_mean() {
        let mut tape = Tape::new();
        let u = tape.constant(
            Tensor::from_dims(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let z = squeeze(&mut tape, u).unwrap();
        assert_eq!(tape.value(z).data, vec![2.5]);
    }

    #[test]
    fn squeeze_matches_manual_mean_on_random_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_dims(&[2, 3, 4, 5], data.clone()).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant(t);
        let z = squeeze(&mut tape, u).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let base = (n * 3 + c) * 20;
                let mean: f64 = data[base..base + 20].iter().sum::<f64>() / 20.0;
                assert_abs_diff_eq!(tape.value(z).data[n * 3 + c], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn excite_zero_params_gives_half() {
        let p = SEParams::zeros(4, 2);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_dims(&[1, 4], vec![1.0, -2.0, 0.3, 7.0]).unwrap());
        let vars = p.as_vars(&mut tape, false);
        let s = excite(&mut tape, z, &vars).unwrap();
        assert_eq!(tape.value(s).data, vec![0.5; 4]);
    }

    #[test]
    fn excite_hand_computed_case() {
        // C=2, r=2: W1=[[1,0]], W2=[[2],[0]], z=[1,-1] -> s = [sigma(2), 0.5]
        let mut p = SEParams::zeros(2, 2);
        p.w1 = Tensor::from_dims(&[1, 2], vec![1.0, 0.0]).unwrap();
        p.w2 = Tensor::from_dims(&[2, 1], vec![2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_dims(&[1, 2], vec![1.0, -1.0]).unwrap());
        let vars = p.as_vars(&mut tape, false);
        let s = excite(&mut tape, z, &vars).unwrap();
        assert_abs_diff_eq!(tape.value(s).data[0], 0.8807970780, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.value(s).data[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn excite_rejects_width_mismatch() {
        let p = SEParams::zeros(4, 2);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let vars = p.as_vars(&mut tape, false);
        assert!(excite(&mut tape, z, &vars).is_err());
    }

    #[test]
    fn scale_identity_and_zero() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_dims(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.constant(Tensor::ones(&[1, 2]));
        let same = se_scale(&mut tape, u, ones).unwrap();
        assert_eq!(tape.value(same).data, tape.value(u).data);

        let gates = tape.constant(Tensor::from_dims(&[1, 2], vec![0.5, 2.0]).unwrap());
        let scaled = se_scale(&mut tape, u, gates).unwrap();
        assert_eq!(tape.value(scaled).data, vec![0.5, 1.0, 6.0, 8.0]);
    }

    #[test]
    fn forward_zero_params_halves_input() {
        let p = SEParams::zeros(3, 2);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[2, 3, 2, 2], 4.0));
        let vars = p.as_vars(&mut tape, false);
        let out = se_forward(&mut tape, u, Some(&vars), None).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 2.0));
        assert_eq!(tape.value(out).shape, tape.value(u).shape);
    }

    #[test]
    fn gate_range_bounds_output() {
        let p = SEParams::init(4, 2, 5, "se");
        let p = p.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 4 * 9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_dims(&[4, 4, 3, 3], data.clone()).unwrap());
        let vars = p.as_vars(&mut tape, false);
        let out = se_forward(&mut tape, u, Some(&vars), None).unwrap();
        for (o, x) in tape.value(out).data.iter().zip(&data) {
            assert!(o.abs() <= x.abs());
        }
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(se_param_count(240, 4), 28800 + 300);
        let p = SEParams::init(240, 4, 0, "se").unwrap();
        assert_eq!(p.param_count(), se_param_count(240, 4));
        // non-dividing case uses ceil
        assert_eq!(bottleneck_width(10, 4), 3);
        let p = SEParams::init(10, 4, 0, "se").unwrap();
        assert_eq!(p.param_count(), se_param_count(10, 4));
    }

    #[test]
    fn full_composition_passes_grad_check() {
        let p = SEParams::init(4, 2, 9, "se").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = Tensor::from_dims(
            &[1, 4, 3, 3],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let inputs = vec![u, p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()];
        let report = grad_check_multi(
            &inputs,
            |tape, vars| {
                let se = SeVars {
                    w1: vars[1],
                    b1: vars[2],
                    w2: vars[3],
                    b2: vars[4],
                };
                let out = se_forward(tape, vars[0], Some(&se), None)?;
                Ok(tape.sum(out))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_error = {}", report.max_rel_error);
    }
}
