use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum and epsilon of every batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormSettings {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormSettings {
    fn default() -> Self {
        BatchNormSettings {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Running mean and variance of one batch-normalization layer.
///
/// Starts at mean 0 / variance 1 so that eval mode is well defined before
/// any training step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

struct BatchNormOp {
    mode: Mode,
    /// Per-channel centre used for normalization (batch or running mean).
    centre: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNormOp {
    fn xhat(&self, x: f64, c: usize) -> f64 {
        (x - self.centre[c]) * self.inv_std[c]
    }
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, c, d, h, w] = x.dims5().expect("rank 5");
        let vol = d * h * w;
        let m = (n * vol) as f64;
        let (xs, gs) = (x.data(), grad.data());

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * vol;
                for i in start..start + vol {
                    dbeta[ch] += gs[i];
                    dgamma[ch] += gs[i] * self.xhat(xs[i], ch);
                }
            }
        }

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; xs.len()];
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * vol;
                    let scale = gamma.data()[ch] * self.inv_std[ch];
                    match self.mode {
                        Mode::Train => {
                            for i in start..start + vol {
                                dx[i] = scale
                                    * (gs[i] - dbeta[ch] / m - self.xhat(xs[i], ch) * dgamma[ch] / m);
                            }
                        }
                        Mode::Eval => {
                            for i in start..start + vol {
                                dx[i] = scale * gs[i];
                            }
                        }
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), dx).expect("dx shape")
        });

        vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], dgamma).expect("dgamma")),
            needs[2].then(|| Tensor::new(vec![c], dbeta).expect("dbeta")),
        ]
    }
}

/// Per-channel batch normalization over `(batch, depth, height, width)`.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// mean and unbiased variance into `stats` with the configured momentum.
/// Eval mode applies the fixed affine map given by `stats` and never
/// mutates them.
pub fn batchnorm(
    tape: &Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    settings: BatchNormSettings,
    mode: Mode,
) -> Result<Var> {
    let xv = tape.value(x)?;
    let (gv, bv) = (tape.value(gamma)?, tape.value(beta)?);
    let [n, c, d, h, w] = xv.dims5()?;
    if gv.shape() != [c] || bv.shape() != [c] || stats.channels() != c {
        return Err(Error::contract(format!(
            "batchnorm: input has {c} channels but affine/stats have {:?}/{:?}/{}",
            gv.shape(),
            bv.shape(),
            stats.channels()
        )));
    }
    let vol = d * h * w;
    let xs = xv.data();

    let (centre, var) = match mode {
        Mode::Train => {
            let m = (n * vol) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * vol;
                    s += xs[start..start + vol].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * vol;
                    ss += xs[start..start + vol]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = ss / m;
            }
            let mom = settings.momentum;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + settings.epsilon).sqrt()).collect();

    let mut out = vec![0.0; xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * vol;
            let (g, be) = (gv.data()[ch], bv.data()[ch]);
            for i in start..start + vol {
                out[i] = g * (xs[i] - centre[ch]) * inv_std[ch] + be;
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    Ok(tape.record(
        &[x, gamma, beta],
        out,
        Box::new(BatchNormOp {
            mode,
            centre,
            inv_std,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(x: Tensor) -> (Tape, Var, Var, Var, usize) {
        let c = x.shape()[1];
        let tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        (tape, xv, g, b, c)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..2 * 3 * 8).map(|_| rng.random_range(-3.0..7.0)).collect();
        let x = Tensor::new(vec![2, 3, 2, 2, 2], data).unwrap();
        let (tape, xv, g, b, c) = setup(x);
        let mut stats = RunningStats::new(c);
        // epsilon = 0 isolates the normalization itself
        let exact = BatchNormSettings { momentum: 0.1, epsilon: 0.0 };
        let y = batchnorm(&tape, xv, g, b, &mut stats, exact, Mode::Train).unwrap();
        let y = tape.value(y).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..2)
                .flat_map(|bi| y.data()[(bi * c + ch) * 8..(bi * c + ch + 1) * 8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
        assert_ne!(stats.mean, vec![0.0; c]);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 4.2);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::full(&[1], 0.3));
        let mut stats = RunningStats::new(1);
        let y = batchnorm(&tape, xv, g, b, &mut stats, BatchNormSettings::default(), Mode::Train).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn eval_mode_is_the_stored_affine_map() {
        let x = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, -1.0, 5.0]).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::new(vec![2], vec![2.0, 0.5]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let mut stats = RunningStats {
            mean: vec![1.5, 0.0],
            var: vec![4.0, 0.25],
        };
        let before = stats.clone();
        let s = BatchNormSettings::default();
        let y = batchnorm(&tape, xv, g, b, &mut stats, s, Mode::Eval).unwrap();
        let y = tape.value(y).unwrap();
        let e0 = 2.0 / (4.0 + s.epsilon).sqrt();
        let e1 = 0.5 / (0.25 + s.epsilon).sqrt();
        let expect = [
            e0 * (1.0 - 1.5) + 0.1,
            e0 * (2.0 - 1.5) + 0.1,
            -e1 - 0.2,
            e1 * 5.0 - 0.2,
        ];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(stats, before);
    }

    #[test]
    fn eval_before_training_uses_unit_initialization() {
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![3.0, -2.0]).unwrap();
        let (tape, xv, g, b, _) = setup(x);
        let mut stats = RunningStats::new(1);
        let y = batchnorm(&tape, xv, g, b, &mut stats, BatchNormSettings::default(), Mode::Eval).unwrap();
        let k = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert_eq!(tape.value(y).unwrap().data(), &[3.0 * k, -2.0 * k]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(vec![1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (tape, xv, g, b, _) = setup(x);
        let mut stats = RunningStats::new(1);
        batchnorm(&tape, xv, g, b, &mut stats, BatchNormSettings::default(), Mode::Train).unwrap();
        // batch mean 2.5, unbiased variance 5/3
        assert!((stats.mean[0] - 0.25).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (tape, xv, _, _, _) = setup(Tensor::zeros(&[1, 2, 1, 1, 1]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        assert!(batchnorm(&tape, xv, g, b, &mut stats, BatchNormSettings::default(), Mode::Train).is_err());
    }
}
