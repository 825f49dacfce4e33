use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Central-difference settings. The step is scaled per component as
/// `step * (1 + |x|)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
}

impl GradCheck {
    /// Loose enough for graphs evaluated in f32.
    pub fn for_f32() -> Self {
        Self {
            step: 3e-3,
            tol: 1e-3,
        }
    }

    /// Full-precision run of the same generic graph.
    pub fn for_f64() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_err: f64,
    /// `(input index, flat component)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_err <= tol,
            "gradient check failed: err {:.3e} > tol {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e}, {} components)",
            self.max_err,
            tol,
            self.worst,
            self.worst_analytic,
            self.worst_numeric,
            self.checked
        );
    }
}

fn eval_scalar<E: Scalar, F>(build: &F, inputs: &[Tensor<E>]) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(NnError::Invalid(format!(
            "gradcheck root must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].to_f64())
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` must construct the same scalar graph for any values with these
/// shapes. Error metric per component: `|a - n| / max(1, |a|, |n|)`, so the
/// comparison is absolute near zero and relative at scale.
pub fn check_gradients<E: Scalar, F>(
    build: F,
    inputs: &[Tensor<E>],
    cfg: &GradCheck,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j].to_f64();
            let h = cfg.step * (1.0 + x.abs());
            let xp = E::from_f64(x + h);
            let xm = E::from_f64(x - h);
            let denom = xp.to_f64() - xm.to_f64();
            if denom == 0.0 {
                return Err(NnError::Invalid(
                    "gradcheck step underflowed the element type".into(),
                ));
            }
            let mut perturbed = inputs.to_vec();
            let mut data = input.to_vec();
            data[j] = xp;
            perturbed[ii] = Tensor::new(input.shape().to_vec(), data.clone())?;
            let fp = eval_scalar(&build, &perturbed)?;
            data[j] = xm;
            perturbed[ii] = Tensor::new(input.shape().to_vec(), data)?;
            let fm = eval_scalar(&build, &perturbed)?;
            let numeric = (fp - fm) / denom;
            let a = analytic[ii][j];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((ii, j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
