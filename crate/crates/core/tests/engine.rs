use catp::agent::{AgentConfig, PlanningSnapshot, RobotAgent, TradingState};
use catp::graph::{fiedler, fiedler_gradient};
use catp::horizon::{budget_constraint, lower_ones, stack_collision};
use catp::sim::{centralized_oracle, run, Mode, OracleSnapshot};
use catp::{
    edge_set, CostRole, CostSpec, DualAscentParams, EstimationParams, HorizonParams, LinkParams,
    RobotBody, ScenarioConfig, WeightedGraph,
};
use nalgebra::DVector;

const LONE_SUPPORT: &str = r#"
name = "lone_support"
dimension = 2
lambda_lb = 0.1
epsilon = 0.1
move_steps = 2
max_cycles = 5
movement_cost = 0.1

[link]
d50 = 3.0
alpha = 2.0

[horizon]
steps = 2
u_max = 0.5

[[robots]]
position = [1.0, -2.0]
radius = 0.2
role = "support"
"#;

const PAIR: &str = r#"
name = "pair"
dimension = 2
lambda_lb = 0.2
epsilon = 0.1
move_steps = 2
max_cycles = 40
movement_cost = 0.05
goal_tolerance = 0.5

[link]
d50 = 4.0
alpha = 2.0

[horizon]
steps = 2
u_max = 0.4

[[robots]]
position = [0.0, 0.0]
radius = 0.2
role = "inspection"
poi = [3.0, 1.0]

[[robots]]
position = [2.0, 0.0]
radius = 0.2
role = "support"
"#;

#[test]
fn lone_support_robot_never_moves() {
    let config = ScenarioConfig::from_toml(LONE_SUPPORT).unwrap();
    for mode in [Mode::Trading, Mode::NoTrading, Mode::Centralized] {
        let log = run(&config, mode).unwrap();
        assert!(!log.positions.is_empty());
        for p in &log.positions {
            assert_eq!(p.position, vec![1.0, -2.0], "{}", mode.as_str());
        }
        assert_eq!(log.violation_count(), 0);
        assert!(log.goals_reached);
    }
}

#[test]
fn inspection_robot_reaches_its_poi() {
    let config = ScenarioConfig::from_toml(PAIR).unwrap();
    for mode in [Mode::Trading, Mode::NoTrading, Mode::Centralized] {
        let log = run(&config, mode).unwrap();
        assert!(log.goals_reached, "{}", mode.as_str());
        assert_eq!(log.violation_count(), 0, "{}", mode.as_str());
        let last = log.positions.iter().rev().find(|p| p.robot == 0).unwrap();
        let d = ((last.position[0] - 3.0).powi(2) + (last.position[1] - 1.0).powi(2)).sqrt();
        assert!(d <= 0.5, "{}: {d}", mode.as_str());
    }
}

#[test]
fn runs_are_reproducible_to_the_byte() {
    let config = ScenarioConfig::paper_inspection();
    let a = run(&config, Mode::Trading).unwrap();
    let b = run(&config, Mode::Trading).unwrap();
    assert_eq!(a.trace_files(), b.trace_files());
}

#[test]
fn without_trading_each_robot_keeps_to_its_share() {
    let config = ScenarioConfig::paper_inspection();
    let log = run(&config, Mode::NoTrading).unwrap();
    assert!(!log.plans.is_empty());
    for plan in &log.plans {
        for r in &plan.reports {
            assert!(r.trades.iter().all(|(_, t)| *t == 0.0));
            let spend = -(lower_ones(config.horizon.steps).kronecker(&r.gradient.transpose())
                * &r.solution.inputs);
            for m in 0..config.horizon.steps {
                assert!(spend[m] <= r.share + 1e-9, "robot {} step {m}", r.robot);
            }
            assert!(r.applied.amax() <= config.horizon.u_max);
        }
    }
}

#[test]
fn robots_leave_each_phase_together() {
    let config = ScenarioConfig::paper_inspection();
    let log = run(&config, Mode::Trading).unwrap();
    for plan in &log.plans {
        assert_eq!(plan.reports.len(), config.n_robots());
    }
    // Every robot's rounds are logged on the same steps.
    let mut by_step = std::collections::BTreeMap::<u64, usize>::new();
    for r in &log.rounds {
        *by_step.entry(r.step).or_default() += 1;
    }
    assert!(by_step.values().all(|&c| c == config.n_robots()));
}

fn toy_agent(id: usize, role: CostRole, n: usize) -> AgentConfig {
    AgentConfig {
        id,
        n_robots: n,
        radius: 0.2,
        cost: CostSpec {
            role,
            movement_weight: 0.1,
        },
        lambda_lb: 0.0,
        planning_margin: 0.0,
        move_steps: 1,
        epsilon: 0.1,
        link: LinkParams::new(3.0, 1.0, 0.05),
        horizon: HorizonParams::new(1, 1.0),
        dual: DualAscentParams {
            rho: 1.0,
            eta: 1e-6,
            max_rounds: 200,
            trade_cap: None,
        },
        estimation: EstimationParams::default(),
        trading: true,
    }
}

#[test]
fn two_robot_dual_ascent_reaches_consensus() {
    // Robot 0 wants to leave; robot 1 has nothing to do and can sell budget.
    let link = LinkParams::new(3.0, 1.0, 0.05);
    let bodies = vec![
        RobotBody::new(0, DVector::from_vec(vec![0.0, 0.0]), 0.2),
        RobotBody::new(1, DVector::from_vec(vec![2.0, 0.0]), 0.2),
    ];
    let f = fiedler(&WeightedGraph::from_bodies(&bodies, &link)).unwrap();
    let lambda_lb = f.value - 0.2;
    let edges = edge_set(&bodies, &link);
    let poi = DVector::from_vec(vec![-3.0, 0.0]);
    let roles = [CostRole::Inspection { poi: poi.clone() }, CostRole::Support];
    let mut agents: Vec<RobotAgent> = (0..2)
        .map(|i| {
            let mut cfg = toy_agent(i, roles[i].clone(), 2);
            cfg.lambda_lb = lambda_lb;
            let horizon = cfg.horizon;
            let gradient = fiedler_gradient(&bodies, &edges, &link, &f, i)
                .unwrap()
                .grad;
            let mut agent = RobotAgent::new(cfg, bodies[i].position.clone());
            let other = &bodies[1 - i];
            agent.plan = Some(PlanningSnapshot {
                neighbors: vec![1 - i],
                lambda_hat: f.value,
                budget: budget_constraint(&gradient, f.value, lambda_lb, 2, 1, &horizon),
                collision: stack_collision(&bodies[i], std::slice::from_ref(other), 0.1, &horizon)
                    .unwrap(),
                gradient,
            });
            agent.trading = TradingState::zeros(1);
            agent
        })
        .collect();

    let mut prev = [DVector::zeros(1), DVector::zeros(1)];
    let mut residual = f64::INFINITY;
    for _ in 0..200 {
        let mut events = Vec::new();
        let o0 = agents[0].dual_ascent_round(&prev[1], &mut events).unwrap();
        let o1 = agents[1].dual_ascent_round(&prev[0], &mut events).unwrap();
        assert!(events.is_empty(), "{events:?}");
        prev = [o0.trades.clone(), o1.trades.clone()];
        residual = (prev[0][0] + prev[1][0]).abs();
        if residual <= 1e-4 {
            break;
        }
    }
    assert!(residual <= 1e-4, "residual {residual}");
    // The buyer is the robot that wants to leave.
    assert!(prev[0][0] > 0.0 && prev[1][0] < 0.0);

    let no_trading: f64 = agents
        .iter()
        .map(|a| a.objective_without_trades().unwrap().unwrap())
        .sum();

    // Finalised plan against the joint optimum on the same snapshot.
    let mut events = Vec::new();
    let f0 = agents[0].finalize(&prev[1], &mut events).unwrap();
    let f1 = agents[1].finalize(&prev[0], &mut events).unwrap();
    assert!(f0.fallback.is_none() && f1.fallback.is_none(), "{events:?}");
    let distributed = f0.solution.objective + f1.solution.objective;

    let mut config = ScenarioConfig::from_toml(PAIR).unwrap();
    config.lambda_lb = lambda_lb;
    config.link = link;
    config.epsilon = 0.1;
    config.movement_cost = 0.1;
    config.horizon = HorizonParams::new(1, 1.0);
    config.robots[0].poi = Some(vec![-3.0, 0.0]);
    let snapshot = OracleSnapshot::from_truth(&config, bodies).unwrap();
    let oracle = centralized_oracle(&config, &snapshot).unwrap();
    // Each robot's multiplier drifts from its partner's by rho (t_ij - t_ji),
    // so the agreed split is feasible and better than no trading but not
    // the joint optimum.
    assert!(oracle.objective <= distributed + 1e-6);
    assert!(
        distributed < no_trading - 1e-6,
        "{distributed} vs {no_trading}"
    );
    let gap = f0.multipliers[0] - f1.multipliers[0];
    assert!((gap - (prev[0][0] - prev[1][0])).abs() <= 1e-3, "{gap}");
}
