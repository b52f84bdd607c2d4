//! Central finite-difference verification of tape adjoints. f64 only: the
//! two-sided difference loses too many digits in f32 to be a usable oracle.

use crate::tape::{Graph, NodeId, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error with an absolute floor of 1e-8 so near-zero gradients do
/// not blow the ratio up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare tape adjoints of a scalar-valued function against central
/// differences (f(x+ε) − f(x−ε)) / 2ε, elementwise over every parameter.
///
/// `build` must assemble the function on a fresh graph from the given
/// parameter nodes (in the order of `params`) and return the scalar output.
/// It must be deterministic; two forward passes that disagree bitwise are
/// rejected.
pub fn grad_check<F>(
    build: F,
    params: &[(String, Tensor<f64>)],
    rel_tol: f64,
    step: f64,
) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TapeError>,
{
    let eval = |ps: &[(String, Tensor<f64>)]| -> Result<(f64, Graph<f64>, Vec<NodeId>, NodeId), TapeError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        let v = g.value(out).item();
        Ok((v, g, ids, out))
    };

    let (v1, graph, ids, out) = eval(params)?;
    let (v2, _, _, _) = eval(params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(TapeError::NonDeterministic);
    }

    let grads = graph.backward(out)?;
    let mut per_param = Vec::with_capacity(params.len());
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.rows(), tensor.cols()));
        let mut worst = 0.0f64;
        for e in 0..tensor.len() {
            let orig = tensor.data()[e];
            work[pi].1.data_mut()[e] = orig + step;
            let (fp, _, _, _) = eval(&work)?;
            work[pi].1.data_mut()[e] = orig - step;
            let (fm, _, _, _) = eval(&work)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_err(analytic.data()[e], numeric);
            if err > worst {
                worst = err;
            }
        }
        per_param.push(ParamCheck { name: name.clone(), max_rel_err: worst });
    }

    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, max_rel_err, rel_tol, passed: max_rel_err <= rel_tol })
}
