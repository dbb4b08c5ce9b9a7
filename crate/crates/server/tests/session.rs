use serde_json::json;
use stt_core::scenario::{bundled_scenario, Scenario};
use stt_core::sim::{run_episode, EpisodeLog, RunOptions, StepRecord};
use stt_core::tube::{radius_from_distance, smooth_min_distance};
use stt_server::session::{replay, Command, CommandScript, Session, SessionConfig};

fn bundled(name: &str) -> Scenario {
    Scenario::from_json(bundled_scenario(name).unwrap()).unwrap()
}

fn jsonl(log: &EpisodeLog) -> Vec<u8> {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    buf
}

fn row_json(r: &StepRecord) -> String {
    serde_json::to_string(r).unwrap()
}

fn run_to_end(s: &mut Session) {
    while s.step() {}
}

#[test]
fn command_free_session_matches_batch_log() {
    for name in ["crossing_2d.json", "quad_slalom.json"] {
        let sc = bundled(name);
        let batch = run_episode(&sc, RunOptions::default()).unwrap();
        let mut s = Session::new(sc, SessionConfig::default()).unwrap();
        run_to_end(&mut s);
        let live = s.log();
        assert_eq!(live.status, batch.status, "{name}");
        assert!(jsonl(&live) == jsonl(&batch), "{name}: live log differs from batch log");
    }
}

#[test]
fn rejected_commands_leave_no_trace() {
    let sc = bundled("crossing_2d.json");
    let batch = run_episode(&sc, RunOptions::default()).unwrap();
    let mut s = Session::new(sc, SessionConfig::default()).unwrap();
    for _ in 0..100 {
        s.step();
    }
    assert!(s.submit(3, Command::SetParam { path: "tube.k1".into(), value: json!(0.01) }).is_err());
    assert!(s.submit(3, Command::DragObstacle { id: 0, position: vec![100.0, 0.0] }).is_err());
    run_to_end(&mut s);
    assert!(jsonl(&s.log()) == jsonl(&batch));
    assert!(s.script().commands.is_empty());
}

/// First tick at which obstacle `id` is inside the switching range of σ.
fn first_active(log: &EpisodeLog, id: u32, rho_max: f64) -> usize {
    log.rows.iter().position(|r| r.sensed.iter().any(|g| g.id == id && g.gap < rho_max)).expect("obstacle becomes active")
}

#[test]
fn drag_affects_dynamics_within_two_ticks() {
    let sc = bundled("crossing_2d.json");
    let rho_max = sc.tube.rho_max;
    let batch = run_episode(&sc, RunOptions::default()).unwrap();
    let t_cmd = first_active(&batch, 0, rho_max) + 20;

    let mut s = Session::new(sc.clone(), SessionConfig::default()).unwrap();
    while s.tick() < t_cmd {
        s.step();
    }
    let here = s.scenario().field.obstacles[0].center(s.time());
    s.submit(7, Command::DragObstacle { id: 0, position: vec![here.x + 0.3, here.y] }).unwrap();
    for _ in 0..5 {
        s.step();
    }
    let live = s.rows();
    for k in 0..=t_cmd {
        assert_eq!(row_json(&live[k]), row_json(&batch.rows[k]), "row {k} changed before the command applied");
    }
    let affected = (t_cmd + 1..=t_cmd + 2).find(|&k| live[k].sigma != batch.rows[k].sigma);
    assert_eq!(affected, Some(t_cmd + 1), "σ must respond at T+1");
}

#[test]
fn dragging_into_the_path_narrows_the_tube() {
    let mut file = bundled("crossing_2d.json").source;
    file.obstacles.retain(|o| o.id == 2);
    let sc = Scenario::from_file(file).unwrap();
    let (rho_max, nu) = (sc.tube.rho_max, sc.tube.nu);
    let batch = run_episode(&sc, RunOptions::default()).unwrap();
    let mut s = Session::new(sc, SessionConfig::default()).unwrap();
    for _ in 0..2000 {
        s.step();
    }
    // The only obstacle sits off the diagonal; pull it to 1.4 m ahead of σ.
    let row = s.rows().last().unwrap();
    let ahead = [row.sigma[0] + 1.0, row.sigma[1] + 1.0];
    s.submit(1, Command::DragObstacle { id: 2, position: ahead.to_vec() }).unwrap();
    let start = s.tick();
    for _ in 0..3000 {
        s.step();
    }
    let rows = &s.rows()[start + 1..];
    let active: Vec<&StepRecord> = rows.iter().filter(|r| r.sensed.iter().any(|g| g.id == 2 && g.gap < rho_max)).collect();
    assert!(!active.is_empty(), "dragged obstacle never entered the switching range");
    let narrowest = rows.iter().map(|r| r.rho).fold(f64::INFINITY, f64::min);
    let undisturbed = batch.rows[start + 1..start + 1 + rows.len()].iter().map(|r| r.rho).fold(f64::INFINITY, f64::min);
    assert!(narrowest < undisturbed - 0.2, "ρ fell to {narrowest}, {undisturbed} without the drag");
    // The logged radius follows the closed form of the logged gaps.
    for r in rows {
        let gaps: Vec<f64> = r.sensed.iter().map(|g| g.gap).collect();
        let d = if gaps.is_empty() { f64::INFINITY } else { smooth_min_distance(&gaps, nu) };
        approx::assert_relative_eq!(r.rho, radius_from_distance(d, rho_max, nu), epsilon = 1e-9);
    }
    let audit = s.audit();
    assert_eq!(audit.disjointness, 0);
    assert_eq!(audit.containment, 0);
    assert_eq!(audit.continuity, 0);
}

fn scripted_session() -> Session {
    let mut s = Session::new(bundled("crossing_2d.json"), SessionConfig::default()).unwrap();
    let plan: Vec<(usize, Command)> = vec![
        (500, Command::SetParam { path: "controller.kappa".into(), value: json!(25.0) }),
        (1200, Command::DragObstacle { id: 3, position: vec![2.0, 3.0] }),
        (1500, Command::Pause),
        (1500, Command::SetParam { path: "tube.k3".into(), value: json!(0.8) }),
        (1500, Command::Resume),
        (4000, Command::SetParam { path: "disturbance.bound".into(), value: json!(0.05) }),
        (6000, Command::DragObstacle { id: 1, position: vec![6.5, 5.5] }),
    ];
    let mut plan = plan.into_iter().peekable();
    loop {
        while let Some((_, cmd)) = plan.next_if(|(t, _)| *t == s.tick()) {
            s.submit(9, cmd).unwrap();
        }
        if !s.step() {
            break;
        }
    }
    s
}

#[test]
fn script_replay_reproduces_the_session() {
    let s = scripted_session();
    let script = s.script();
    assert_eq!(script.commands.len(), 7);
    let text = serde_json::to_string(&script).unwrap();
    let parsed: CommandScript = serde_json::from_str(&text).unwrap();
    let replayed = replay(&parsed, SessionConfig::default()).unwrap();
    assert!(jsonl(&replayed) == jsonl(&s.log()));
    let again = replay(&parsed, SessionConfig::default()).unwrap();
    assert!(jsonl(&again) == jsonl(&replayed));
    let batch = run_episode(&bundled("crossing_2d.json"), RunOptions::default()).unwrap();
    assert!(jsonl(&replayed) != jsonl(&batch));
}

#[test]
fn replay_stops_when_left_paused() {
    let mut s = Session::new(bundled("crossing_2d.json"), SessionConfig::default()).unwrap();
    for _ in 0..10 {
        s.step();
    }
    s.submit(1, Command::Pause).unwrap();
    s.step();
    let log = replay(&s.script(), SessionConfig::default()).unwrap();
    assert_eq!(log.rows.len(), 11);
}
