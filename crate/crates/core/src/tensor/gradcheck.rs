//! Finite-difference gradient oracle.
//!
//! The network is promoted to `f64`, the scalar loss is a fixed random
//! projection of the output, and every parameter element (plus every input
//! element) is perturbed by `±step`. Frozen parameters are skipped. Dropout masks are reproduced by
//! reseeding the mask generator before each forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ForwardMode, KernelError, Network, Tensor};

const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub input_max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.input_max_rel_error < self.tolerance
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error.is_nan() || p.max_rel_error >= self.tolerance)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(self.input_max_rel_error, f64::max)
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

pub fn grad_check(net: &Network<f32>, input: &Tensor<f32>, tolerance: f64) -> Result<GradCheckReport, KernelError> {
    grad_check_with(net, input, tolerance, 1e-3, |_, _| {})
}

/// `tamper` may rewrite the analytic gradient of a named parameter before
/// comparison; it exists so tests can exercise the failure path.
pub fn grad_check_with(
    net: &Network<f32>,
    input: &Tensor<f32>,
    tolerance: f64,
    step: f64,
    mut tamper: impl FnMut(&str, &mut [f64]),
) -> Result<GradCheckReport, KernelError> {
    const MASK_SEED: u64 = 0x5eed;
    let base: Network<f64> = net.cast();
    let x: Tensor<f64> = input.cast();

    let loss_of = |n: &Network<f64>, x: &Tensor<f64>, proj: &[f64]| -> Result<f64, KernelError> {
        let mut n = n.clone();
        let (y, _) = n.forward(x, ForwardMode::Train, &mut ChaCha8Rng::seed_from_u64(MASK_SEED))?;
        Ok(y.data().iter().zip(proj).map(|(a, b)| a * b).sum())
    };

    let mut analytic_net = base.clone();
    analytic_net.zero_grad();
    let (y, tape) = analytic_net.forward(&x, ForwardMode::Train, &mut ChaCha8Rng::seed_from_u64(MASK_SEED))?;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let proj: Vec<f64> = (0..y.len()).map(|_| proj_rng.random::<f64>() * 2.0 - 1.0).collect();
    let upstream = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let input_grad = analytic_net.backward_input(&tape, &upstream)?;

    let names = base.param_names();
    let mut params = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        if !base.params()[pi].trainable {
            continue;
        }
        let mut analytic: Vec<f64> = analytic_net.params()[pi].grad.data().to_vec();
        tamper(name, &mut analytic);
        let mut worst = 0.0f64;
        for (ei, &a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus.params_mut()[pi].value.data_mut()[ei] += step;
            let mut minus = base.clone();
            minus.params_mut()[pi].value.data_mut()[ei] -= step;
            let numeric = (loss_of(&plus, &x, &proj)? - loss_of(&minus, &x, &proj)?) / (2.0 * step);
            worst = worst.max(rel_error(a, numeric));
        }
        params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
        });
    }

    let mut input_worst = 0.0f64;
    for (ei, &a) in input_grad.data().iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[ei] += step;
        let mut minus = x.clone();
        minus.data_mut()[ei] -= step;
        let numeric = (loss_of(&base, &plus, &proj)? - loss_of(&base, &minus, &proj)?) / (2.0 * step);
        input_worst = input_worst.max(rel_error(a, numeric));
    }

    Ok(GradCheckReport {
        params,
        input_max_rel_error: input_worst,
        tolerance,
    })
}
