//! Scenario files: TOML text with a fixed set of tables.
//!
//! ```toml
//! name = "two_robots"
//! dimension = 2
//! lambda_lb = 0.1
//! epsilon = 0.1
//! move_steps = 1
//! max_cycles = 20
//! movement_cost = 0.1
//!
//! [link]
//! d50 = 4.0
//! alpha = 2.0
//!
//! [horizon]
//! steps = 2
//! u_max = 0.5
//!
//! [[robots]]
//! position = [0.0, 0.0]
//! radius = 0.2
//! role = "inspection"
//! poi = [3.0, 0.0]
//!
//! [[robots]]
//! position = [2.0, 0.0]
//! radius = 0.2
//! role = "support"
//! ```
//!
//! Optional keys: `seed`, `jitter`, `planning_margin`, `delta_t`, `goal_tolerance`,
//! `collision_radius`, `link.w_min`, `horizon.norm`, the `[dual_ascent]`
//! table (`rho`, `eta`, `max_rounds`, `trade_cap`) and `[estimation]`
//! (`zeta`). Unknown keys are rejected.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::EstimationParams;
use crate::error::{Error, FieldError, Result};
use crate::graph::{fiedler, WeightedGraph};
use crate::horizon::HorizonParams;
use crate::link::{LinkParams, RobotBody};
use crate::qp::{CostRole, CostSpec, DualAscentParams};

/// Source of the bundled ten-robot inspection scenario.
pub const PAPER_INSPECTION: &str = include_str!("../../../scenarios/paper_inspection.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Inspection,
    Support,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub position: Vec<f64>,
    pub radius: f64,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poi: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Spatial dimension `n`.
    pub dimension: usize,
    pub lambda_lb: f64,
    /// Slack above `lambda_lb` held back when sizing budgets.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub planning_margin: f64,
    pub epsilon: f64,
    pub move_steps: usize,
    pub max_cycles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Uniform perturbation in `[-jitter, jitter]` added to every initial
    /// coordinate, drawn from `seed`.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub jitter: f64,
    /// Seconds per step; bookkeeping only.
    #[serde(default = "one")]
    pub delta_t: f64,
    /// Inspection robots closer than this to their POI are done.
    #[serde(default = "one")]
    pub goal_tolerance: f64,
    /// Weight `h` on squared input norms.
    pub movement_cost: f64,
    /// Non-neighbours within this distance also get separating hyperplanes.
    /// Defaults to twice the link range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collision_radius: Option<f64>,
    pub link: LinkParams,
    pub horizon: HorizonParams,
    #[serde(default)]
    pub dual_ascent: DualAscentParams,
    #[serde(default)]
    pub estimation: EstimationParams,
    pub robots: Vec<RobotSpec>,
}

/// Reads, parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioConfig::from_toml(&text)
}

impl ScenarioConfig {
    /// Parses and validates scenario text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| locate_key(text, s.start))
                .unwrap_or_default();
            Error::InvalidScenario(vec![FieldError::new(path, e.message().trim())])
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    /// The bundled ten-robot inspection scenario.
    pub fn paper_inspection() -> Self {
        Self::from_toml(PAPER_INSPECTION).expect("bundled scenario is valid")
    }

    pub fn n_robots(&self) -> usize {
        self.robots.len()
    }

    pub fn collision_range(&self) -> f64 {
        self.collision_radius
            .unwrap_or_else(|| 2.0 * self.link.max_range())
    }

    /// Declared positions plus the seeded jitter.
    pub fn initial_positions(&self) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.robots
            .iter()
            .map(|r| {
                DVector::from_iterator(
                    r.position.len(),
                    r.position.iter().map(|&x| {
                        if self.jitter > 0.0 {
                            x + rng.gen_range(-self.jitter..=self.jitter)
                        } else {
                            x
                        }
                    }),
                )
            })
            .collect()
    }

    pub fn initial_bodies(&self) -> Vec<RobotBody> {
        self.initial_positions()
            .into_iter()
            .zip(&self.robots)
            .enumerate()
            .map(|(i, (p, r))| RobotBody::new(i, p, r.radius))
            .collect()
    }

    pub fn cost_spec(&self, robot: usize) -> CostSpec {
        let spec = &self.robots[robot];
        let role = match (&spec.role, &spec.poi) {
            (Role::Inspection, Some(poi)) => CostRole::Inspection {
                poi: DVector::from_vec(poi.clone()),
            },
            _ => CostRole::Support,
        };
        CostSpec {
            role,
            movement_weight: self.movement_cost,
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, path: &str, msg: &str| {
            if !ok {
                errs.push(FieldError::new(path, msg));
            }
        };
        need(self.dimension >= 1, "dimension", "must be at least 1");
        need(pos(self.lambda_lb), "lambda_lb", "must be positive");
        need(
            nonneg(self.planning_margin),
            "planning_margin",
            "must be non-negative",
        );
        need(pos(self.epsilon), "epsilon", "must be positive");
        need(self.move_steps >= 1, "move_steps", "must be at least 1");
        need(self.max_cycles >= 1, "max_cycles", "must be at least 1");
        need(nonneg(self.jitter), "jitter", "must be non-negative");
        need(pos(self.delta_t), "delta_t", "must be positive");
        need(
            pos(self.goal_tolerance),
            "goal_tolerance",
            "must be positive",
        );
        need(
            nonneg(self.movement_cost),
            "movement_cost",
            "must be non-negative",
        );
        if let Some(r) = self.collision_radius {
            need(nonneg(r), "collision_radius", "must be non-negative");
        }
        need(pos(self.link.d50), "link.d50", "must be positive");
        need(pos(self.link.alpha), "link.alpha", "must be positive");
        need(
            self.link.w_min > 0.0 && self.link.w_min < 1.0,
            "link.w_min",
            "must lie in (0, 1)",
        );
        need(
            self.horizon.steps >= 1,
            "horizon.steps",
            "must be at least 1",
        );
        need(pos(self.horizon.u_max), "horizon.u_max", "must be positive");
        need(
            pos(self.dual_ascent.rho),
            "dual_ascent.rho",
            "must be positive",
        );
        need(
            pos(self.dual_ascent.eta),
            "dual_ascent.eta",
            "must be positive",
        );
        need(
            self.dual_ascent.max_rounds >= 1,
            "dual_ascent.max_rounds",
            "must be at least 1",
        );
        if let Some(cap) = self.dual_ascent.trade_cap {
            need(pos(cap), "dual_ascent.trade_cap", "must be positive");
        }
        need(
            nonneg(self.estimation.zeta),
            "estimation.zeta",
            "must be non-negative",
        );
        need(
            !self.robots.is_empty(),
            "robots",
            "at least one robot required",
        );

        let mut shapes_ok = true;
        for (i, r) in self.robots.iter().enumerate() {
            let p = format!("robots[{i}]");
            if r.position.len() != self.dimension || !r.position.iter().all(|x| x.is_finite()) {
                shapes_ok = false;
                need(
                    false,
                    &format!("{p}.position"),
                    &format!("must hold {} finite coordinates", self.dimension),
                );
            }
            need(pos(r.radius), &format!("{p}.radius"), "must be positive");
            match (r.role, &r.poi) {
                (Role::Inspection, None) => {
                    need(false, &format!("{p}.poi"), "inspection robots need a poi")
                }
                (Role::Support, Some(_)) => {
                    need(false, &format!("{p}.poi"), "support robots take no poi")
                }
                (_, Some(poi)) if poi.len() != self.dimension => need(
                    false,
                    &format!("{p}.poi"),
                    &format!("must hold {} coordinates", self.dimension),
                ),
                _ => {}
            }
        }

        if shapes_ok && errs.is_empty() {
            let bodies = self.initial_bodies();
            for i in 0..bodies.len() {
                for j in (i + 1)..bodies.len() {
                    let d = (&bodies[i].position - &bodies[j].position).norm();
                    let need_d = bodies[i].radius + bodies[j].radius + self.epsilon;
                    if d < need_d {
                        errs.push(FieldError::new(
                            format!("robots[{i}].position"),
                            format!(
                                "robots {i} and {j} are {d} apart, closer than radii plus clearance {need_d}"
                            ),
                        ));
                    }
                }
            }
            if errs.is_empty() && bodies.len() >= 2 {
                let graph = WeightedGraph::from_bodies(&bodies, &self.link);
                match fiedler(&graph) {
                    Ok(f) if f.value > self.lambda_lb => {}
                    Ok(f) => errs.push(FieldError::new(
                        "robots",
                        format!(
                            "initial Fiedler value {} does not exceed lambda_lb {}",
                            f.value, self.lambda_lb
                        ),
                    )),
                    Err(e) => errs.push(FieldError::new("robots", e.to_string())),
                }
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(errs))
        }
    }
}

fn pos(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

/// Best-effort dotted path of the key at byte `offset`, using table headers
/// and the key on that line.
fn locate_key(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut counts: std::collections::HashMap<String, usize> = Default::default();
    let mut consumed = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(name) = trimmed
            .strip_prefix("[[")
            .and_then(|s| s.strip_suffix("]]"))
        {
            let c = counts.entry(name.to_string()).or_default();
            table = format!("{name}[{c}]");
            *c += 1;
        } else if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            table = name.to_string();
        }
        let at_line = offset < consumed + line.len();
        consumed += line.len();
        if at_line {
            let key = trimmed
                .split_once('=')
                .map(|(k, _)| k.trim().to_string())
                .filter(|k| !k.starts_with('['));
            return match (table.is_empty(), key) {
                (true, Some(k)) => k,
                (false, Some(k)) => format!("{table}.{k}"),
                (_, None) => table,
            };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "pair"
dimension = 2
lambda_lb = 0.1
epsilon = 0.1
move_steps = 1
max_cycles = 5
movement_cost = 0.1

[link]
d50 = 4.0
alpha = 2.0

[horizon]
steps = 2
u_max = 0.5

[[robots]]
position = [0.0, 0.0]
radius = 0.2
role = "inspection"
poi = [3.0, 0.0]

[[robots]]
position = [2.0, 0.0]
radius = 0.2
role = "support"
"#;

    fn paths(err: Error) -> Vec<String> {
        match err {
            Error::InvalidScenario(v) => v.into_iter().map(|f| f.path).collect(),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn minimal_parses_with_defaults() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.n_robots(), 2);
        assert_eq!(c.link.w_min, 0.05);
        assert_eq!(c.dual_ascent, DualAscentParams::default());
        assert_eq!(c.goal_tolerance, 1.0);
        assert_eq!(c.initial_positions()[1], DVector::from_vec(vec![2.0, 0.0]));
    }

    #[test]
    fn round_trip() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        let again = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        let p = ScenarioConfig::paper_inspection();
        assert_eq!(ScenarioConfig::from_toml(&p.to_toml()).unwrap(), p);
    }

    #[test]
    fn negative_d50_named() {
        let text = MINIMAL.replace("d50 = 4.0", "d50 = -4.0");
        let p = paths(ScenarioConfig::from_toml(&text).unwrap_err());
        assert!(p.contains(&"link.d50".to_string()), "{p:?}");
    }

    #[test]
    fn overlap_names_pair() {
        let text = MINIMAL.replace("position = [2.0, 0.0]", "position = [0.45, 0.0]");
        match ScenarioConfig::from_toml(&text).unwrap_err() {
            Error::InvalidScenario(v) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].message.contains("robots 0 and 1"), "{}", v[0]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn every_violation_reported() {
        let text = MINIMAL
            .replace("epsilon = 0.1", "epsilon = -1.0")
            .replace("u_max = 0.5", "u_max = 0.0")
            .replace(
                "radius = 0.2\nrole = \"support\"",
                "radius = -0.2\nrole = \"support\"",
            );
        let p = paths(ScenarioConfig::from_toml(&text).unwrap_err());
        assert_eq!(p, ["epsilon", "horizon.u_max", "robots[1].radius"]);
    }

    #[test]
    fn unknown_and_missing_keys() {
        let text = MINIMAL.replace("alpha = 2.0", "alpha = 2.0\nbeta = 1.0");
        let p = paths(ScenarioConfig::from_toml(&text).unwrap_err());
        assert_eq!(p, ["link.beta"]);
        let text = MINIMAL.replace("max_cycles = 5\n", "");
        match ScenarioConfig::from_toml(&text).unwrap_err() {
            Error::InvalidScenario(v) => assert!(v[0].message.contains("max_cycles")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn weak_initial_graph_rejected() {
        let text = MINIMAL.replace("lambda_lb = 0.1", "lambda_lb = 5.0");
        let p = paths(ScenarioConfig::from_toml(&text).unwrap_err());
        assert_eq!(p, ["robots"]);
    }

    #[test]
    fn jitter_is_seeded() {
        let mut c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        c.jitter = 0.01;
        c.seed = 7;
        let a = c.initial_positions();
        assert_eq!(a, c.initial_positions());
        c.seed = 8;
        assert_ne!(a, c.initial_positions());
        assert!(a[0].amax() <= 0.01);
    }
}
