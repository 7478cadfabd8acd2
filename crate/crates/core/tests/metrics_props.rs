use fedda::federation::{client_round, run_training, ServerState};
use fedda::metrics::{emit_csv, read_csv, ExperimentConfig, VirtualTracker};
use fedda::ParamVector;

const BASE: &str = "clients = 5
local_steps = 4
rounds = 30
seed = 21

[problem]
kind = \"quadratic\"
dim = 5
curvature = [0.5, 2.0]
heterogeneity = 1.0
noise = 0.5
samples = 30

[schedule]
mode = \"constant\"
eta = 0.05
c = 10.0

[batch]
init = 8
local = 2
";

fn config(sections: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{BASE}\n{sections}")).unwrap();
    cfg.output.svg = None;
    cfg
}

#[test]
fn virtual_sequence_moves_along_the_averaged_estimate() {
    let cfg = config("");
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    let state = ServerState::initialize(&problem, &params, &ParamVector::filled(5, 1.5), cfg.batch.init).unwrap();
    let b = state.broadcast(4);
    let outs: Vec<_> = problem.clients().iter().enumerate().map(|(k, c)| client_round(&b, &params, c, k, true).unwrap()).collect();
    let tracker = |i: usize| {
        let states: Vec<_> = outs.iter().map(|o| &o.trace.as_ref().unwrap()[i]).collect();
        VirtualTracker::at_step(&states, &b.x, &state.h, params.lambda, &params.set).unwrap()
    };
    for i in 0..4 {
        let (cur, next) = (tracker(i), tracker(i + 1));
        let eta = params.schedule.eta_at(i as u64);
        let step = state.h.inverse_apply(&cur.nu_bar).unwrap().scale(-params.lambda * eta);
        let moved = next.x_tilde.sub(&cur.x_tilde).unwrap();
        assert!(moved.dist(&step).unwrap() <= 1e-12 * cur.x_tilde.norm().max(1.0), "step {i}: {:e} {:e}", moved.dist(&step).unwrap(), cur.x_tilde.norm());
    }
}

#[test]
fn csv_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_csv(&run_training(&cfg).unwrap().rows, &a).unwrap();
    emit_csv(&run_training(&cfg).unwrap().rows, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_csv(&a).unwrap(), run_training(&cfg).unwrap().rows);
}

#[test]
fn measure_is_the_sum_of_its_terms() {
    for row in run_training(&config("")).unwrap().rows {
        assert_eq!(row.measure_g, row.term_drift + row.term_esterr);
    }
}

/// `‖∇f(x̃)‖² ≤ 2‖H‖²/ρ² · G` with `H` frozen over each round.
#[test]
fn measure_bounds_the_gradient_at_the_virtual_point() {
    let cfg = config("[adaptive]\nepsilon = 0.1\n");
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    let rows = run_training(&cfg).unwrap().rows;
    let mut state = ServerState::initialize(&problem, &params, &cfg.initial_point(5).unwrap(), cfg.batch.init).unwrap();
    let mut checked = 0;
    for round in 0..cfg.rounds {
        let b = state.broadcast(4);
        let outs: Vec<_> = problem.clients().iter().enumerate().map(|(k, c)| client_round(&b, &params, c, k, true).unwrap()).collect();
        let h_max = state.h.max_eigenvalue();
        for i in 0..4 {
            let states: Vec<_> = outs.iter().map(|o| &o.trace.as_ref().unwrap()[i]).collect();
            let cur = VirtualTracker::at_step(&states, &b.x, &state.h, params.lambda, &params.set).unwrap();
            let grad = problem.gradient(&cur.x_tilde).unwrap().norm_sq();
            let g = rows[round * 4 + i].measure_g;
            assert!(grad <= 2.0 * h_max * h_max / (0.1 * 0.1) * g * (1.0 + 1e-9), "round {round} step {i}");
            checked += 1;
        }
        let ups: Vec<_> = outs
            .into_iter()
            .enumerate()
            .map(|(k, o)| fedda::federation::Upload { client: k, z: o.z, nu: o.nu })
            .collect();
        state = fedda::federation::server_round(&state, &ups, &params.adaptive, params.lambda, &params.set, params.eta_last(state.round)).unwrap();
    }
    assert_eq!(checked, 120);
}

#[test]
fn gradient_mapping_starts_as_a_scaled_gradient() {
    let cfg = config("");
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    let state = ServerState::initialize(&problem, &params, &cfg.initial_point(5).unwrap(), cfg.batch.init).unwrap();
    let expected = state.h.inverse_apply(&problem.gradient(&state.x).unwrap()).unwrap().norm() * params.lambda;
    let row = &run_training(&config("")).unwrap().rows[0];
    assert!((row.grad_map - expected).abs() <= 1e-12 * expected);
}

#[test]
fn gradient_mapping_vanishes_at_an_interior_optimum() {
    let text = BASE.replace("init = 8\nlocal = 2", "init = \"full\"\nlocal = \"full\"");
    let mut long = ExperimentConfig::parse(&format!("{text}\n[constraint]\nkind = \"l2-ball\"\nradius = 50.0\n[adaptive]\nepsilon = 1.0\n")).unwrap();
    long.rounds = 600;
    let rows = run_training(&long).unwrap().rows;
    let first = rows[0].grad_map;
    let last = rows.last().unwrap().grad_map;
    assert!(last < 1e-6 * first, "{first:e} -> {last:e}");
}
