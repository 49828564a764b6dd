use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("finite difference for input {input}[{index}] is not finite")]
    NonFiniteDifference { input: usize, index: usize },
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of a scalar function of `inputs`.
///
/// The error per element is `|ad − fd| / max(1e-8, |ad| + |fd|)`. Elements
/// closer to zero than `2·eps` are moved to `±4·eps` first so that kinks at
/// the origin (relu, abs, leaky relu) are never straddled.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, GradCheckError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_elements(f, inputs, eps, &all)
}

/// [`grad_check`] restricted to at most `per_input` elements of each input,
/// drawn with a seeded generator. Useful when a full sweep is too costly.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64, GradCheckError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| rand::seq::index::sample(&mut rng, t.len(), per_input.min(t.len())).into_vec())
        .collect();
    check_elements(f, inputs, eps, &picks)
}

fn check_elements<F>(f: F, inputs: &[Tensor], eps: f64, picks: &[Vec<usize>]) -> Result<f64, GradCheckError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for x in t.data_mut() {
                if x.abs() < 2.0 * eps {
                    *x = if *x < 0.0 { -4.0 * eps } else { 4.0 * eps };
                }
            }
            t
        })
        .collect();

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    g.check_finite()?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut worst = 0.0_f64;
    let mut probe = inputs.clone();
    for (k, input) in inputs.iter().enumerate() {
        for &i in &picks[k] {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let fd = (plus - minus) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(GradCheckError::NonFiniteDifference { input: k, index: i });
            }
            let ad = analytic[k].data()[i];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
