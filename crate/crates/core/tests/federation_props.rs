use fedda::federation::{client_round, run_training, server_round, ServerState, Upload};
use fedda::metrics::ExperimentConfig;
use fedda::ParamVector;

const BASE: &str = "clients = 4
local_steps = 5
rounds = 20
seed = 3
x0 = [2.0, -1.0, 0.5, 1.0, -2.0, 0.0]

[problem]
kind = \"quadratic\"
dim = 6
curvature = [0.5, 2.0]
heterogeneity = 1.0
noise = 0.5
samples = 40

[schedule]
mode = \"practical\"
eta0 = 0.1
w = 10.0
c = 5.0

[batch]
init = 8
local = 2
";

/// `extra` holds top-level keys only.
fn config(extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{extra}\n{BASE}")).unwrap();
    cfg.output.svg = None;
    cfg
}

/// Runs rounds by hand, handing each round's traced client outputs to `visit`.
fn each_round(cfg: &ExperimentConfig, mut visit: impl FnMut(&fedda::federation::Broadcast, &[fedda::federation::ClientRoundOutput], &ServerState, &ServerState)) {
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    let mut state = ServerState::initialize(&problem, &params, &cfg.initial_point(problem.dim()).unwrap(), cfg.batch.init).unwrap();
    for _ in 0..cfg.rounds {
        let b = state.broadcast(params.local_steps());
        let outs: Vec<_> =
            problem.clients().iter().enumerate().map(|(k, c)| client_round(&b, &params, c, k, true).unwrap()).collect();
        let ups: Vec<Upload> = outs.iter().enumerate().map(|(k, o)| Upload { client: k, z: o.z.clone(), nu: o.nu.clone() }).collect();
        let next = server_round(&state, &ups, &params.adaptive, params.lambda, &params.set, params.eta_last(state.round)).unwrap();
        visit(&b, &outs, &state, &next);
        state = next;
    }
}

#[test]
fn dual_state_is_the_weighted_sum_of_estimates() {
    let cfg = config("");
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    each_round(&cfg, |b, outs, _, _| {
        for i in 1..=5 {
            let z_bar = ParamVector::mean(outs.iter().map(|o| &o.trace.as_ref().unwrap()[i].z)).unwrap();
            let mut sum = ParamVector::zeros(6);
            for l in 0..i {
                let nu_bar = ParamVector::mean(outs.iter().map(|o| &o.trace.as_ref().unwrap()[l].nu_local)).unwrap();
                sum = ParamVector::axpy(-params.schedule.eta_at(b.step + l as u64), &nu_bar, &sum).unwrap();
            }
            assert!(z_bar.dist(&sum).unwrap() <= 1e-12 * sum.norm().max(1.0));
        }
    });
}

#[test]
fn iterates_stay_feasible() {
    for set in [
        "[constraint]\nkind = \"box\"\nlo = -0.3\nhi = 0.4\n",
        "[constraint]\nkind = \"l2-ball\"\nradius = 0.7\n",
        "[constraint]\nkind = \"l1-ball\"\nradius = 0.9\n",
    ] {
        let cfg = ExperimentConfig::parse(&format!("{BASE}\n{set}")).unwrap();
        let c = cfg.constraint.build(6).unwrap();
        each_round(&cfg, |_, outs, _, next| {
            assert!(c.violation(&next.x).unwrap() <= 1e-10, "{set}");
            for o in outs {
                for s in o.trace.as_ref().unwrap() {
                    assert!(c.violation(&s.x_local).unwrap() <= 1e-10, "{set}");
                }
            }
        });
    }
}

#[test]
fn identical_uploads_reproduce_the_local_iterate() {
    let cfg = config("");
    let problem = cfg.build_problem().unwrap();
    let params = cfg.fedda_params(&problem).unwrap();
    let state = ServerState::initialize(&problem, &params, &cfg.initial_point(6).unwrap(), cfg.batch.init).unwrap();
    let b = state.broadcast(5);
    let out = client_round(&b, &params, problem.client(2), 2, true).unwrap();
    let ups: Vec<Upload> = (0..3).map(|k| Upload { client: k, z: out.z.clone(), nu: out.nu.clone() }).collect();
    let next = server_round(&state, &ups, &params.adaptive, params.lambda, &params.set, params.eta_last(0)).unwrap();
    assert!(next.x.dist(&out.trace.unwrap()[5].x_local).unwrap() <= 1e-12);
}

#[test]
fn clients_agree_at_the_start_of_each_round() {
    let table = run_training(&config("trace_clients = true")).unwrap();
    for row in table.rows.iter().filter(|r| r.t % 5 == 0) {
        assert_eq!(row.consensus_z, Some(0.0));
        assert_eq!(row.consensus_nu, Some(0.0));
    }
    assert!(table.rows.iter().any(|r| r.consensus_z.unwrap() > 0.0));
}

#[test]
fn zero_rounds_give_an_empty_table() {
    let mut cfg = config("");
    cfg.rounds = 0;
    let table = run_training(&cfg).unwrap();
    assert!(table.rows.is_empty());
    assert_eq!(table.final_x, cfg.initial_point(6).unwrap());
}

#[test]
fn partial_participation_is_flagged() {
    let table = run_training(&config("participating = 2")).unwrap();
    assert!(table.diagnostic_only);
    assert_eq!(table.rows.len(), 100);
    assert!(!run_training(&config("")).unwrap().diagnostic_only);
}

/// Identical clients with `H = εI`, exact gradients and uniform curvature `L`
/// reduce to gradient descent with step `λη/ε`, so the measure contracts by
/// `(1 − ληL/ε)²` per step.
#[test]
fn homogeneous_run_contracts_at_the_predicted_rate() {
    let l = 2.0;
    let cfg = ExperimentConfig::parse(&format!(
        "clients = 8\nlocal_steps = 5\nrounds = 400\nseed = 1\nx0 = [1.0, -1.0, 2.0, 0.5]\n\
         [problem]\nkind = \"quadratic\"\ndim = 4\ncurvature = [{l}, {l}]\nheterogeneity = 0.0\nnoise = 0.3\n\
         [schedule]\nmode = \"theorem\"\n\
         [adaptive]\nbeta = 0.0\nepsilon = 0.01\n\
         [batch]\ninit = \"full\"\nlocal = \"full\"\n"
    ))
    .unwrap();
    let table = run_training(&cfg).unwrap();
    assert_eq!(table.rows.len(), 2000);
    let mut worst: f64 = 0.0;
    for w in table.rows.windows(2) {
        let predicted = (1.0 - cfg.lambda * w[0].eta * l / 0.01).powi(2);
        worst = worst.max((w[1].measure_g / w[0].measure_g / predicted - 1.0).abs());
    }
    assert!(worst <= 1e-8, "{worst:e}");
    let total = table.rows[0].measure_g / table.rows.last().unwrap().measure_g;
    let predicted: f64 = table.rows[..1999].iter().map(|r| (1.0 - cfg.lambda * r.eta * l / 0.01).powi(-2)).product();
    assert!((total / predicted - 1.0).abs() < 1e-6, "{total} vs {predicted}");
}

#[test]
fn diverging_runs_report_where_they_failed() {
    let text = BASE.replace("mode = \"practical\"\neta0 = 0.1\nw = 10.0", "mode = \"constant\"\neta = 1e300");
    let err = run_training(&ExperimentConfig::parse(&text).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("round 0, step "), "{msg}");
}
