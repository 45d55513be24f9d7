//! Distributed communication-aware trajectory planning for holonomic robot
//! teams.
//!
//! Each robot plans its own receding-horizon motion under a linearised lower
//! bound on the algebraic connectivity (Fiedler value) of the communication
//! graph. The global bound is split into equal per-robot budgets which robots
//! trade with their neighbours through dual ascent, so no robot needs a
//! central planner. A synchronous simulator steps the robots, delivers
//! neighbour messages with one step of latency and records traces; a
//! centralised solver of the same linearised problem serves as a reference.

pub mod agent;
pub mod consensus;
pub mod error;
pub mod graph;
pub mod horizon;
pub mod link;
pub mod message;
pub mod qp;
pub mod scenario;
pub mod sim;

pub use agent::{AgentConfig, AgentPhase, RobotAgent, TradingState};
pub use consensus::{AdjacencyEstimate, ConvergenceState, EstimationParams};
pub use error::{Error, FieldError, Result};
pub use graph::{fiedler, laplacian, FiedlerGradient, FiedlerResult, WeightedGraph};
pub use horizon::{BudgetConstraint, CollisionConstraint, HorizonParams, InputNorm};
pub use link::{edge_set, link_weight, neighbors, EdgeSet, LinkParams, RobotBody};
pub use qp::{CostRole, CostSpec, DualAscentParams, LocalSolution, QuadraticProgram, SolveStatus};
pub use scenario::{parse_scenario, RobotSpec, Role, ScenarioConfig};
pub use sim::{run, MetricsLog, Mode};
