//! Independent reference computations for the acceptance suite.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use newsret::deciles::{DecileRow, DecileTable, Forecast};
use newsret::params::ParamStore;
use newsret::tape::{Tape, Var};
use newsret::Tensor;
use rand::Rng;

/// Central differences: truncation error is O(h^2), roundoff about
/// `eps * |loss| / h`, so 1e-4 keeps both well under 1e-8 here.
pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale. Some are
/// exactly zero (a key bias shifts a whole softmax row) and central
/// differences only return roundoff for them.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every entry of the named parameters.
pub fn check_params(
    params: &ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    loss: impl Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for name in names {
        let grad = analytic.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for i in 0..grad.numel() {
            let orig = p.get(name).unwrap().data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = loss(&p);
            p.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = loss(&p);
            p.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(grad.data()[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {:.3e}, numeric {numeric:.3e}", grad.data()[i]));
            }
        }
    }
    worst
}

/// Checks `d/dx sum(R ∘ f(x))` for fixed random weights `R`, over every entry
/// of every input.
pub fn check_kernel<R: Rng>(
    inputs: &[Tensor],
    rng: &mut R,
    f: impl Fn(&mut Tape, &[Var]) -> newsret::Result<Var>,
) -> f64 {
    let build = |tape: &mut Tape, xs: &[Tensor]| -> Var {
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true)).unwrap()).collect();
        f(tape, &vars).unwrap()
    };
    let mut probe = Tape::new();
    let out = build(&mut probe, inputs);
    let shape = probe.value(out).shape().to_vec();
    let weights = Tensor::randn(shape[0], shape[1], 1.0, rng);

    let scalar = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true)).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = tape.constant(weights.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        (tape, vars, loss)
    };

    let (tape, vars, loss) = scalar(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let (t, _, l) = scalar(&xs);
            let up = t.value(l).item();
            xs[k].data_mut()[i] = orig - FD_STEP;
            let (t, _, l) = scalar(&xs);
            let down = t.value(l).item();
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Quadratic-time decile labels: the rank of each item is the number of items
/// strictly before it in (value, stock id) order.
pub fn brute_force_deciles(items: &[(&str, f64)]) -> Vec<usize> {
    let n = items.len();
    items
        .iter()
        .map(|&(id, v)| {
            let rank = items
                .iter()
                .filter(|&&(other_id, w)| w < v || (w == v && other_id < id))
                .count();
            10 * rank / n
        })
        .collect()
}

pub fn brute_force_table(forecasts: &[Forecast]) -> DecileTable {
    let mut dates: Vec<NaiveDate> = forecasts.iter().map(|f| f.date).collect();
    dates.sort();
    dates.dedup();
    let mut count = [0usize; 10];
    let mut sq = [0.0f64; 10];
    let mut hits = [0usize; 10];
    let mut ret = [0.0f64; 10];
    for date in dates {
        let mut group: Vec<&Forecast> = forecasts.iter().filter(|f| f.date == date).collect();
        group.sort_by(|a, b| a.stock_id.cmp(&b.stock_id));
        let pred: Vec<(&str, f64)> = group.iter().map(|f| (f.stock_id.as_str(), f.predicted)).collect();
        let truth: Vec<(&str, f64)> = group.iter().map(|f| (f.stock_id.as_str(), f.actual)).collect();
        let pd = brute_force_deciles(&pred);
        let td = brute_force_deciles(&truth);
        for (i, f) in group.iter().enumerate() {
            let d = pd[i];
            count[d] += 1;
            sq[d] += (f.predicted - f.actual).powi(2);
            if pd[i] == td[i] {
                hits[d] += 1;
            }
            ret[d] += f.actual;
        }
    }
    DecileTable {
        rows: (0..10)
            .map(|d| {
                let n = count[d] as f64;
                DecileRow {
                    decile: d,
                    count: count[d],
                    rmse: (count[d] > 0).then(|| (sq[d] / n).sqrt()),
                    precision: (count[d] > 0).then(|| hits[d] as f64 / n),
                    mean_return: (count[d] > 0).then(|| ret[d] / n),
                }
            })
            .collect(),
    }
}
