use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Compares reverse-mode gradients of `f` at `inputs` against central finite
/// differences and returns the worst relative error over every input entry:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let original = input.data()[j];
            work[i].data_mut()[j] = original + epsilon;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = original - epsilon;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic[i].data()[j];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
