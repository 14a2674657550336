//! Scenario configuration, stored as TOML.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arma::PerformanceMap;
use crate::error::{Error, Result};
use crate::fuzzy::{DecisionVariable, FuzzyRule, MembershipFunction};
use crate::linear_mpc::LinearMpcConfig;
use crate::nmpc::{
    euler_discretize, exact_discretize_double_integrator, BMatrixConvention, CostTerm, NmpcConfig,
    QuadraticCost, SqpSettings, UprightPendulumCost,
};
use crate::plant::{cart_pendulum_model, CartPendulumParams, DoubleIntegrator, PlantModel, SaturationLimits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Sample time in seconds.
    pub ts: f64,
    /// RK4 substeps per sample.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub plant: PlantConfig,
    pub limits: LimitsConfig,
    pub reference: ReferenceConfig,
    pub mpc: MpcConfig,
    /// Closed-loop MPC runs that provide training data.
    pub source_runs: Vec<RunConfig>,
    /// One ARMA controller and fuzzy rule per entry.
    pub controllers: Vec<ControllerConfig>,
    pub fuzzy: FuzzyConfig,
    /// Initial state and length of the comparison runs.
    pub evaluation: RunConfig,
    pub checks: ChecksConfig,
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantConfig {
    DoubleIntegrator,
    CartPendulum {
        #[serde(default)]
        params: CartPendulumParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Output reference `r`.
    pub r: Vec<f64>,
    /// State reference used by the MPC.
    pub x_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MpcConfig {
    /// Condensed linear MPC on the sampled double integrator.
    Linear {
        horizon: usize,
        #[serde(default)]
        discretization: BMatrixConvention,
        /// Matrices are lists of rows.
        q: Vec<Vec<f64>>,
        q_f: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
    },
    /// SQP on the Euler-discretized plant.
    Nonlinear {
        horizon: usize,
        stage_cost: CostConfig,
        terminal_cost: CostConfig,
        input_weight: Vec<Vec<f64>>,
        #[serde(default)]
        sqp: SqpSettings,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostConfig {
    Quadratic { weight: Vec<Vec<f64>> },
    UprightPendulum { weights: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub x0: Vec<f64>,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub name: String,
    /// Name of the source run the training slice is cut from.
    pub source: String,
    pub window: usize,
    /// `R_θ = regularization · I`.
    pub regularization: f64,
    /// Inclusive time interval `[t_start, t_end]` in seconds.
    pub slice: [f64; 2],
    pub performance: PerformanceMap,
    /// Train with the input limits imposed on every training row.
    #[serde(default = "default_true")]
    pub constrained: bool,
    /// The rule firing this controller, one membership per component of γ.
    pub memberships: Vec<MembershipFunction>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzyConfig {
    pub decision: DecisionVariable,
}

/// Pass/fail assertions evaluated at the end of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// Outputs compared modulo 2π.
    #[serde(default)]
    pub angle_outputs: Vec<usize>,
    pub source_run: String,
    pub source_outputs: Vec<usize>,
    pub source_final_tol: f64,
    pub farma_outputs: Vec<usize>,
    pub farma_final_tol: f64,
    /// Bound on `max_k |y_F-ARMA - y_MPC|` over the evaluation runs.
    #[serde(default)]
    pub max_deviation: Option<f64>,
    /// Slack allowed on the input limits.
    #[serde(default = "default_input_tol")]
    pub input_tol: f64,
    /// Lower bound on mean MPC step time over mean F-ARMA step time.
    #[serde(default)]
    pub min_timing_ratio: Option<f64>,
}

fn default_input_tol() -> f64 {
    1e-9
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidParameter(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            what: "scenario config",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }

    /// Double-integrator setpoint tracking with linear MPC.
    pub fn example1() -> Self {
        let mf = |up: bool| {
            if up {
                MembershipFunction::RampUp { a: 0.4, b: 0.6 }
            } else {
                MembershipFunction::RampDown { a: 0.4, b: 0.6 }
            }
        };
        let arma = |name: &str, slice: [f64; 2], up: bool| ControllerConfig {
            name: name.into(),
            source: "mpc".into(),
            window: 10,
            regularization: 0.0,
            slice,
            performance: PerformanceMap::TrackingError,
            constrained: true,
            memberships: vec![mf(up)],
        };
        Self {
            name: "example1".into(),
            ts: 0.01,
            substeps: 10,
            plant: PlantConfig::DoubleIntegrator,
            limits: LimitsConfig {
                u_min: vec![-10.0],
                u_max: vec![10.0],
            },
            reference: ReferenceConfig {
                r: vec![2.0],
                x_ref: vec![2.0, 0.0],
            },
            mpc: MpcConfig::Linear {
                horizon: 10,
                discretization: BMatrixConvention::Exact,
                q: vec![vec![10.0, 0.0], vec![0.0, 10.0]],
                q_f: vec![vec![1e5, 0.0], vec![0.0, 1e5]],
                r: vec![vec![1e-2]],
            },
            source_runs: vec![RunConfig {
                name: "mpc".into(),
                x0: vec![0.0, 0.0],
                duration: 6.0,
            }],
            controllers: vec![arma("arma1", [0.0, 6.0], true), arma("arma2", [1.5, 6.0], false)],
            fuzzy: FuzzyConfig {
                decision: DecisionVariable::AbsTrackingError,
            },
            evaluation: RunConfig {
                name: "evaluation".into(),
                x0: vec![0.0, 0.0],
                duration: 6.0,
            },
            checks: ChecksConfig {
                angle_outputs: vec![],
                source_run: "mpc".into(),
                source_outputs: vec![0],
                source_final_tol: 0.01,
                farma_outputs: vec![0],
                farma_final_tol: 0.05,
                max_deviation: Some(0.2),
                input_tol: 1e-9,
                min_timing_ratio: Some(10.0),
            },
        }
    }

    /// Cart-pendulum swing-up with nonlinear MPC.
    pub fn example2() -> Self {
        let lo = PI / 3.0 - PI / 30.0;
        let hi = PI / 3.0 + PI / 30.0;
        Self {
            name: "example2".into(),
            ts: 0.02,
            substeps: 10,
            plant: PlantConfig::CartPendulum {
                params: CartPendulumParams::default(),
            },
            limits: LimitsConfig {
                u_min: vec![-30.0],
                u_max: vec![30.0],
            },
            reference: ReferenceConfig {
                r: vec![0.0, 0.0],
                x_ref: vec![0.0; 4],
            },
            mpc: MpcConfig::Nonlinear {
                horizon: 100,
                stage_cost: CostConfig::UprightPendulum {
                    weights: [30.0, 20.0, 60.0, 20.0],
                },
                terminal_cost: CostConfig::UprightPendulum {
                    weights: [30.0, 20.0, 60.0, 20.0],
                },
                input_weight: vec![vec![50.0]],
                sqp: SqpSettings::default(),
            },
            source_runs: vec![
                RunConfig {
                    name: "swing-up".into(),
                    x0: vec![0.0, 0.0, PI, 0.0],
                    duration: 15.0,
                },
                RunConfig {
                    name: "stabilization".into(),
                    x0: vec![1.0, 0.0, PI / 5.0, 0.0],
                    duration: 15.0,
                },
            ],
            controllers: vec![
                ControllerConfig {
                    name: "arma1".into(),
                    source: "swing-up".into(),
                    window: 30,
                    regularization: 1e-3,
                    slice: [0.0, 2.5],
                    performance: PerformanceMap::PendulumSwingUp,
                    constrained: true,
                    memberships: vec![MembershipFunction::RampUp { a: lo, b: hi }],
                },
                ControllerConfig {
                    name: "arma2".into(),
                    source: "stabilization".into(),
                    window: 10,
                    regularization: 1e-8,
                    slice: [0.0, 15.0],
                    performance: PerformanceMap::PendulumUpright,
                    constrained: true,
                    memberships: vec![MembershipFunction::RampDown { a: lo, b: hi }],
                },
            ],
            fuzzy: FuzzyConfig {
                decision: DecisionVariable::AbsWrappedAngle { output: 1 },
            },
            evaluation: RunConfig {
                name: "evaluation".into(),
                x0: vec![0.0, 0.0, 19.0 * PI / 20.0, 0.0],
                duration: 15.0,
            },
            checks: ChecksConfig {
                angle_outputs: vec![1],
                source_run: "swing-up".into(),
                source_outputs: vec![0, 1],
                source_final_tol: 0.1,
                farma_outputs: vec![1],
                farma_final_tol: 0.1,
                max_deviation: None,
                input_tol: 1e-9,
                min_timing_ratio: Some(100.0),
            },
        }
    }

    /// Selects the `[Ts²; Ts]` input matrix for linear MPC.
    pub fn set_paper_compat(&mut self, on: bool) {
        if let MpcConfig::Linear { discretization, .. } = &mut self.mpc {
            *discretization = if on {
                BMatrixConvention::PaperCompat
            } else {
                BMatrixConvention::Exact
            };
        }
    }

    pub fn plant_model(&self) -> Result<Arc<dyn PlantModel>> {
        Ok(match &self.plant {
            PlantConfig::DoubleIntegrator => Arc::new(DoubleIntegrator),
            PlantConfig::CartPendulum { params } => Arc::new(cart_pendulum_model(*params)?),
        })
    }

    pub fn saturation(&self) -> Result<SaturationLimits> {
        SaturationLimits::new(
            DVector::from_column_slice(&self.limits.u_min),
            DVector::from_column_slice(&self.limits.u_max),
        )
    }

    pub fn output_reference(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reference.r)
    }

    pub fn state_reference(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reference.x_ref)
    }

    pub fn source_run(&self, name: &str) -> Option<&RunConfig> {
        self.source_runs.iter().find(|r| r.name == name)
    }

    pub fn regularization(&self, controller: &ControllerConfig) -> Result<DMatrix<f64>> {
        let model = self.plant_model()?;
        let lz = controller.performance.dim(model.output_dim());
        let lu = model.input_dim();
        let n = crate::arma::theta_len(controller.window, lu, lz);
        Ok(DMatrix::identity(n, n) * controller.regularization)
    }

    pub fn fuzzy_rules(&self) -> Result<Vec<FuzzyRule>> {
        self.controllers
            .iter()
            .map(|c| FuzzyRule::new(c.memberships.clone()))
            .collect()
    }

    pub fn linear_mpc(&self) -> Result<LinearMpcConfig> {
        let MpcConfig::Linear {
            horizon,
            discretization,
            q,
            q_f,
            r,
        } = &self.mpc
        else {
            return Err(Error::InvalidParameter("scenario does not use linear MPC".into()));
        };
        if self.plant != PlantConfig::DoubleIntegrator {
            return Err(Error::InvalidParameter(
                "linear MPC is only available for the double integrator".into(),
            ));
        }
        let (a, b, c) = exact_discretize_double_integrator(self.ts, *discretization);
        LinearMpcConfig::new(
            a,
            b,
            c,
            *horizon,
            matrix(q, "Q̄")?,
            matrix(q_f, "Q̄_f")?,
            matrix(r, "R̄")?,
            self.saturation()?,
        )
    }

    pub fn nonlinear_mpc(&self) -> Result<NmpcConfig> {
        let MpcConfig::Nonlinear {
            horizon,
            stage_cost,
            terminal_cost,
            input_weight,
            sqp,
        } = &self.mpc
        else {
            return Err(Error::InvalidParameter("scenario does not use nonlinear MPC".into()));
        };
        let cost = |c: &CostConfig| -> Result<Arc<dyn CostTerm>> {
            Ok(match c {
                CostConfig::Quadratic { weight } => Arc::new(QuadraticCost::new(matrix(weight, "cost weight")?)?),
                CostConfig::UprightPendulum { weights } => Arc::new(UprightPendulumCost::new(*weights)?),
            })
        };
        let dynamics: Arc<dyn crate::nmpc::DiscreteDynamics> = match &self.plant {
            PlantConfig::DoubleIntegrator => Arc::new(euler_discretize(DoubleIntegrator, self.ts)?),
            PlantConfig::CartPendulum { params } => Arc::new(euler_discretize(cart_pendulum_model(*params)?, self.ts)?),
        };
        NmpcConfig::new(
            dynamics,
            *horizon,
            cost(stage_cost)?,
            cost(terminal_cost)?,
            Arc::new(QuadraticCost::new(matrix(input_weight, "input weight")?)?),
            self.saturation()?,
            sqp.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.ts > 0.0 && self.ts.is_finite()) || self.substeps == 0 {
            return bad(format!("ts must be positive and substeps nonzero (ts={}, substeps={})", self.ts, self.substeps));
        }
        let model = self.plant_model()?;
        let (lx, lu, ly) = (model.state_dim(), model.input_dim(), model.output_dim());
        let limits = self.saturation()?;
        if limits.dim() != lu {
            return bad(format!("limits have {} channels, plant has {lu} inputs", limits.dim()));
        }
        if self.reference.r.len() != ly || self.reference.x_ref.len() != lx {
            return bad("reference dimensions do not match the plant".into());
        }
        match &self.mpc {
            MpcConfig::Linear { .. } => {
                self.linear_mpc()?;
            }
            MpcConfig::Nonlinear { .. } => {
                self.nonlinear_mpc()?;
            }
        }

        let mut names = HashSet::new();
        for run in self.source_runs.iter().chain(std::iter::once(&self.evaluation)) {
            if run.x0.len() != lx {
                return bad(format!("run `{}` has a {}-dimensional initial state", run.name, run.x0.len()));
            }
            if !(run.duration >= 0.0 && run.duration.is_finite()) {
                return bad(format!("run `{}` has an invalid duration", run.name));
            }
        }
        for run in &self.source_runs {
            if !names.insert(run.name.as_str()) {
                return bad(format!("duplicate source run `{}`", run.name));
            }
        }

        if self.controllers.is_empty() {
            return bad("at least one controller is required".into());
        }
        let lg = self.fuzzy.decision.dim(ly);
        if let DecisionVariable::AbsWrappedAngle { output } = self.fuzzy.decision {
            if output >= ly {
                return bad(format!("decision output {output} out of range"));
            }
        }
        let mut cnames = HashSet::new();
        for c in &self.controllers {
            if !cnames.insert(c.name.as_str()) {
                return bad(format!("duplicate controller `{}`", c.name));
            }
            let Some(src) = self.source_run(&c.source) else {
                return bad(format!("controller `{}` refers to unknown run `{}`", c.name, c.source));
            };
            let [t0, t1] = c.slice;
            if !(0.0 <= t0 && t0 < t1 && t1 <= src.duration + 1e-9) {
                return bad(format!(
                    "controller `{}` slice [{t0}, {t1}] is not within run `{}` of {} s",
                    c.name, src.name, src.duration
                ));
            }
            if c.window == 0 || !(c.regularization >= 0.0) {
                return bad(format!("controller `{}` needs a positive window and R ≥ 0", c.name));
            }
            if c.performance != PerformanceMap::TrackingError && ly != 2 {
                return bad(format!("controller `{}`: pendulum performance maps need y = [p, φ]", c.name));
            }
            if c.memberships.len() != lg {
                return bad(format!(
                    "controller `{}` has {} memberships, decision variable has {lg} components",
                    c.name,
                    c.memberships.len()
                ));
            }
            for m in &c.memberships {
                m.validate()?;
            }
        }

        let ch = &self.checks;
        if self.source_run(&ch.source_run).is_none() {
            return bad(format!("checks refer to unknown run `{}`", ch.source_run));
        }
        if ch
            .angle_outputs
            .iter()
            .chain(&ch.source_outputs)
            .chain(&ch.farma_outputs)
            .any(|&j| j >= ly)
        {
            return bad("checked output index out of range".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::example1().validate().unwrap();
        ScenarioConfig::example2().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        for cfg in [ScenarioConfig::example1(), ScenarioConfig::example2()] {
            let text = cfg.to_toml();
            let back: ScenarioConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn rejects_slice_outside_run() {
        let mut cfg = ScenarioConfig::example1();
        cfg.controllers[1].slice = [1.5, 7.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_compat_switch() {
        let mut cfg = ScenarioConfig::example1();
        cfg.set_paper_compat(true);
        let lin = cfg.linear_mpc().unwrap();
        assert!((lin.b()[0] - 1e-4).abs() < 1e-18);
    }
}
