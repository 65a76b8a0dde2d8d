use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

/// Minimum number of parameter elements probed when the network has that many.
pub const MIN_PARAM_SAMPLES: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over probed parameter and input elements.
    pub max_rel_error: f64,
    pub param_max_rel_error: f64,
    pub input_max_rel_error: f64,
    pub params_checked: usize,
    pub inputs_checked: usize,
    /// Name (or `input[i]`) of the worst element.
    pub worst: String,
}

/// Below this magnitude differences are judged absolutely: central differences
/// carry roundoff of order ε·|loss|/step, which would swamp a relative measure.
pub const ABSOLUTE_FLOOR: f64 = 1e-7;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABSOLUTE_FLOOR)
}

/// Compares backpropagated gradients against central finite differences.
///
/// `loss` maps the network output to `(loss, dloss/doutput)`. At least
/// [`MIN_PARAM_SAMPLES`] parameter elements (all of them if fewer exist) and
/// up to the same number of input elements are probed.
pub fn grad_check<F>(
    net: &Network<f64>,
    input: &Tensor<f64>,
    loss: F,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    if step > 1e-3 {
        log::warn!("finite-difference step {step} is large; truncation error will dominate the comparison");
    }
    let mut work = net.clone();
    work.zero_grad();
    let (out, trace) = work.forward(input)?;
    let (_, upstream) = loss(&out);
    let input_grad = work.backward(&trace, &upstream)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .params()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    work.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, g))| (0..g.len()).map(move |ei| (pi, ei)))
        .collect();
    let n_params = flat.len().min(MIN_PARAM_SAMPLES);
    let picks = sample(&mut rng, flat.len(), n_params);

    let eval = |n: &Network<f64>, x: &Tensor<f64>| -> Result<f64> { Ok(loss(&n.infer(x)?).0) };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param_max_rel_error: 0.0,
        input_max_rel_error: 0.0,
        params_checked: 0,
        inputs_checked: 0,
        worst: String::new(),
    };
    for idx in picks.iter() {
        let (pi, ei) = flat[idx];
        let original = nth_param_value(&mut work, pi, ei, None);
        nth_param_value(&mut work, pi, ei, Some(original + step));
        let plus = eval(&work, input)?;
        nth_param_value(&mut work, pi, ei, Some(original - step));
        let minus = eval(&work, input)?;
        nth_param_value(&mut work, pi, ei, Some(original));
        let numeric = (plus - minus) / (2.0 * step);
        let err = rel_error(analytic[pi].1[ei], numeric);
        report.params_checked += 1;
        if err > report.param_max_rel_error {
            report.param_max_rel_error = err;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{ei}]", analytic[pi].0);
            }
        }
    }

    let n_inputs = input.len().min(MIN_PARAM_SAMPLES);
    let picks = sample(&mut rng, input.len(), n_inputs);
    let mut x = input.clone();
    for i in picks.iter() {
        let original = x.data()[i];
        x.data_mut()[i] = original + step;
        let plus = eval(&work, &x)?;
        x.data_mut()[i] = original - step;
        let minus = eval(&work, &x)?;
        x.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let err = rel_error(input_grad.data()[i], numeric);
        report.inputs_checked += 1;
        if err > report.input_max_rel_error {
            report.input_max_rel_error = err;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("input[{i}]");
            }
        }
    }
    Ok(report)
}

fn nth_param_value(net: &mut Network<f64>, pi: usize, ei: usize, set: Option<f64>) -> f64 {
    let p = net.params_mut().nth(pi).expect("parameter index");
    let old = p.value.data()[ei];
    if let Some(v) = set {
        p.value.data_mut()[ei] = v;
    }
    old
}
