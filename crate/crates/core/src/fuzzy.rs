//! Takagi-Sugeno blending of ARMA controllers (F-ARMA).
//!
//! Rule `i` fires with weight `w_i = ∏_j μ_{i,j}(γ_j)` and the blended request
//! is `u_r = Σ w_i σ(u_r,i) / Σ w_i`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::arma::ArmaController;
use crate::error::{check_dim, Error, Result};
use crate::plant::{wrap_pi, ControlInput, Controller, SaturationLimits};

/// Piecewise-linear ramp between breakpoints `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MembershipFunction {
    /// 0 below `a`, 1 above `b`.
    RampUp { a: f64, b: f64 },
    /// 1 below `a`, 0 above `b`.
    RampDown { a: f64, b: f64 },
}

impl MembershipFunction {
    pub fn ramp_up(a: f64, b: f64) -> Result<Self> {
        check_breakpoints(a, b)?;
        Ok(MembershipFunction::RampUp { a, b })
    }

    pub fn ramp_down(a: f64, b: f64) -> Result<Self> {
        check_breakpoints(a, b)?;
        Ok(MembershipFunction::RampDown { a, b })
    }

    pub fn breakpoints(&self) -> (f64, f64) {
        match *self {
            MembershipFunction::RampUp { a, b } | MembershipFunction::RampDown { a, b } => (a, b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.breakpoints();
        check_breakpoints(a, b)
    }

    pub fn eval(&self, gamma: f64) -> f64 {
        match *self {
            MembershipFunction::RampUp { a, b } => ((gamma - a) / (b - a)).clamp(0.0, 1.0),
            MembershipFunction::RampDown { a, b } => ((b - gamma) / (b - a)).clamp(0.0, 1.0),
        }
    }
}

fn check_breakpoints(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::InvalidParameter(format!(
            "membership breakpoints must satisfy a < b, got ({a}, {b})"
        )));
    }
    Ok(())
}

pub fn membership_eval(mf: &MembershipFunction, gamma: f64) -> f64 {
    mf.eval(gamma)
}

/// One membership per decision-variable component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyRule {
    pub memberships: Vec<MembershipFunction>,
}

impl FuzzyRule {
    pub fn new(memberships: Vec<MembershipFunction>) -> Result<Self> {
        if memberships.is_empty() {
            return Err(Error::InvalidParameter("a fuzzy rule needs at least one membership".into()));
        }
        for m in &memberships {
            m.validate()?;
        }
        Ok(Self { memberships })
    }

    /// Product T-norm over the components of `gamma`.
    pub fn weight(&self, gamma: &DVector<f64>) -> f64 {
        self.memberships
            .iter()
            .zip(gamma.iter())
            .map(|(m, g)| m.eval(*g))
            .product()
    }
}

pub fn rule_weights(rules: &[FuzzyRule], gamma: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(rules.len(), rules.iter().map(|r| r.weight(gamma)))
}

/// The decision variable `γ(r, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecisionVariable {
    /// `|r - y|`, componentwise.
    AbsTrackingError,
    /// `|wrap(y[output])|`.
    AbsWrappedAngle { output: usize },
}

impl DecisionVariable {
    pub fn dim(&self, output_dim: usize) -> usize {
        match self {
            DecisionVariable::AbsTrackingError => output_dim,
            DecisionVariable::AbsWrappedAngle { .. } => 1,
        }
    }

    pub fn evaluate(&self, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        match *self {
            DecisionVariable::AbsTrackingError => (r - y).abs(),
            DecisionVariable::AbsWrappedAngle { output } => DVector::from_element(1, wrap_pi(y[output]).abs()),
        }
    }
}

/// `Σ w_i u_i / Σ w_i`, or the plain mean of `u_i` when every weight is zero.
pub fn blend(weights: &DVector<f64>, outputs: &[DVector<f64>]) -> DVector<f64> {
    assert_eq!(weights.len(), outputs.len(), "one weight per output");
    assert!(!outputs.is_empty(), "nothing to blend");
    let total: f64 = weights.sum();
    let mut u = DVector::zeros(outputs[0].len());
    if total > 0.0 {
        for (w, o) in weights.iter().zip(outputs) {
            if *w != 0.0 {
                u.axpy(*w / total, o, 1.0);
            }
        }
    } else {
        for o in outputs {
            u += o;
        }
        u /= outputs.len() as f64;
    }
    u
}

#[derive(Debug, Clone)]
pub struct FarmaController {
    controllers: Vec<ArmaController>,
    rules: Vec<FuzzyRule>,
    decision: DecisionVariable,
    limits: SaturationLimits,
    last_weights: DVector<f64>,
}

impl FarmaController {
    /// `rules[i]` fires `controllers[i]`.
    pub fn new(
        controllers: Vec<ArmaController>,
        rules: Vec<FuzzyRule>,
        decision: DecisionVariable,
        limits: SaturationLimits,
    ) -> Result<Self> {
        if controllers.is_empty() {
            return Err(Error::InvalidParameter("F-ARMA needs at least one controller".into()));
        }
        check_dim("fuzzy rules", controllers.len(), rules.len())?;
        let lg = rules[0].memberships.len();
        for r in &rules {
            check_dim("rule memberships", lg, r.memberships.len())?;
        }
        for c in &controllers {
            check_dim("member controller inputs", limits.dim(), c.input_dim())?;
        }
        let n = controllers.len();
        Ok(Self {
            controllers,
            rules,
            decision,
            limits,
            last_weights: DVector::zeros(n),
        })
    }

    pub fn controllers(&self) -> &[ArmaController] {
        &self.controllers
    }

    pub fn rules(&self) -> &[FuzzyRule] {
        &self.rules
    }

    /// Rule weights used by the most recent step.
    pub fn last_weights(&self) -> &DVector<f64> {
        &self.last_weights
    }

    /// Advances every member once and returns the blended request.
    pub fn advance(&mut self, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let outputs: Vec<DVector<f64>> = self
            .controllers
            .iter_mut()
            .map(|c| {
                let u_r = c.advance(r, y);
                self.limits.saturate(&u_r)
            })
            .collect();
        let gamma = self.decision.evaluate(r, y);
        self.last_weights = rule_weights(&self.rules, &gamma);
        blend(&self.last_weights, &outputs)
    }

    pub fn reset(&mut self) {
        self.controllers.iter_mut().for_each(ArmaController::reset);
        self.last_weights.fill(0.0);
    }
}

pub fn farma_step(farma: &mut FarmaController, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    farma.advance(r, y)
}

impl Controller for FarmaController {
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>> {
        check_dim(
            "fuzzy decision variable",
            self.rules[0].memberships.len(),
            self.decision.dim(input.y.len()),
        )?;
        for c in &self.controllers {
            check_dim(
                "ARMA performance variable",
                c.perf_dim(),
                c.performance_map().dim(input.y.len()),
            )?;
        }
        Ok(self.advance(input.r, input.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arma::PerformanceMap;
    use nalgebra::dvector;
    use std::f64::consts::PI;

    #[test]
    fn example_memberships() {
        let mu1 = MembershipFunction::ramp_up(0.4, 0.6).unwrap();
        assert!((mu1.eval(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(mu1.eval(0.3), 0.0);
        assert_eq!(mu1.eval(0.7), 1.0);
        let mu2 = MembershipFunction::ramp_down(PI / 3.0 - PI / 30.0, PI / 3.0 + PI / 30.0).unwrap();
        assert!((mu2.eval(PI / 3.0) - 0.5).abs() < 1e-12);
        assert!(MembershipFunction::ramp_up(0.6, 0.4).is_err());
    }

    #[test]
    fn product_weights() {
        let half = MembershipFunction::ramp_up(0.0, 1.0).unwrap();
        let rule = FuzzyRule::new(vec![half, half]).unwrap();
        assert_eq!(rule.weight(&dvector![0.5, 0.5]), 0.25);
        assert_eq!(rule.weight(&dvector![0.5, -1.0]), 0.0);
        let single = FuzzyRule::new(vec![half]).unwrap();
        assert_eq!(rule_weights(&[single], &dvector![0.3]), dvector![0.3]);
    }

    #[test]
    fn blending_cases() {
        let outs = [dvector![1.0], dvector![3.0]];
        assert_eq!(blend(&dvector![1.0, 0.0], &outs), dvector![1.0]);
        assert_eq!(blend(&dvector![0.4, 0.4], &outs), dvector![2.0]);
        assert_eq!(blend(&dvector![0.0, 0.0], &outs), dvector![2.0]);
    }

    #[test]
    fn decision_variables() {
        let g = DecisionVariable::AbsTrackingError.evaluate(&dvector![2.0], &dvector![2.5]);
        assert_eq!(g, dvector![0.5]);
        let g = DecisionVariable::AbsWrappedAngle { output: 1 }.evaluate(&dvector![0.0, 0.0], &dvector![5.0, 2.0 * PI - 0.1]);
        assert!((g[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn members_advance_even_at_zero_weight() {
        let lim = SaturationLimits::symmetric(1, 10.0).unwrap();
        let make = || ArmaController::new(dvector![0.0, 1.0], 1, 1, 1, lim.clone(), PerformanceMap::TrackingError).unwrap();
        let rules = vec![
            FuzzyRule::new(vec![MembershipFunction::ramp_up(0.4, 0.6).unwrap()]).unwrap(),
            FuzzyRule::new(vec![MembershipFunction::ramp_down(0.4, 0.6).unwrap()]).unwrap(),
        ];
        let mut f = FarmaController::new(vec![make(), make()], rules, DecisionVariable::AbsTrackingError, lim).unwrap();
        for _ in 0..3 {
            f.advance(&dvector![2.0], &dvector![0.0]);
        }
        assert!(f.controllers().iter().all(|c| c.steps() == 3));
        assert_eq!(f.last_weights(), &dvector![1.0, 0.0]);
    }
}
