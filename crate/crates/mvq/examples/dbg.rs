use mvq::arch::{load_checkpoint, q_value};
use mvq::cem::{q_evaluator, cem_maximize, select_action, CemConfig, SelectionMode};
use mvq::render::{nominal_cameras, observe, perturb_cameras};
use mvq::sim::{check_success, reset_episode, step, Task, TaskConfig, ActionCommand, Aperture};
use mvq::trainer::{collect_episode, mix, PolicySource};

fn rollout(params: &mvq::arch::QNetworkParams, cfg: &TaskConfig, cem: &CemConfig, seed: u64, no_term: bool) {
    let res = params.resolution;
    let mut state = reset_episode(cfg, seed).unwrap();
    let cameras = perturb_cameras(&nominal_cameras(), mix(seed, 1));
    let mut obs = observe(&state, &cameras, false, res);
    loop {
        let mut a = select_action(params, &obs, cem, SelectionMode::Greedy, mix(seed, 100 + state.step_count as u64)).unwrap();
        if no_term {
            a.terminate = false;
        }
        let q = q_value(params, &obs, &a, None).unwrap().q_value;
        let hole = state.fixture.as_ref().map(|f| f.middle_hole());
        let held = state.attached_block();
        let blk = state.blocks[held.unwrap_or(0)].position;
        let d_hole = hole.map(|h| ((blk.x - h.x).powi(2) + (blk.y - h.y).powi(2)).sqrt()).unwrap_or(-1.0);
        println!(
            "  t={:2} q={:+.3} d=({:+.3},{:+.3},{:+.3}) o={} c={} T={} | grip=({:+.3},{:+.3},{:+.3}) ap={:?} held={:?} blk_dxy={:.3} blk_z={:+.3}",
            state.step_count, q, a.displacement.x, a.displacement.y, a.displacement.z,
            a.gripper_open as u8, a.gripper_close as u8, a.terminate as u8,
            state.gripper_position.x, state.gripper_position.y, state.gripper_position.z,
            state.gripper_aperture, held, d_hole, blk.z,
        );
        let out = step(&state, &a, cfg);
        obs = observe(&out.state, &cameras, false, res);
        if out.terminal {
            println!("  terminal success={}", check_success(&out.state, cfg));
            break;
        }
        state = out.state;
    }
}

fn main() {
    let path = std::env::args().nth(1).unwrap_or("/tmp/probe.ckpt".into());
    let params = load_checkpoint(path.as_ref()).unwrap();
    let res = params.resolution;
    let cfg = TaskConfig::new(Task::Insertion);
    let cem = CemConfig::default();
    let mode = std::env::args().nth(2);
    if matches!(mode.as_deref(), Some("rollout") | Some("noterm")) {
        let no_term = mode.as_deref() == Some("noterm");
        for s in 0..5 {
            println!("rollout seed {s}:");
            rollout(&params, &cfg, &cem, 5000 + s, no_term);
        }
        return;
    }
    let mut seed = 0;
    let ep = loop {
        let ep = collect_episode(PolicySource::Scripted, &cfg, &cem, res, false, mix(7777, seed)).unwrap();
        if ep.success { break ep; }
        seed += 1;
    };
    let n = ep.transitions.len();
    let q_at = |i: usize| q_value(&params, &ep.transitions[i].obs, &ep.transitions[i].action, None).unwrap().q_value;
    let last = ep.transitions.last().unwrap();
    let mut term = ActionCommand::noop();
    term.terminate = true;
    let q_term = q_value(&params, &last.obs, &term, None).unwrap().q_value;
    let q_term_start = q_value(&params, &ep.transitions[0].obs, &term, None).unwrap().q_value;
    let q_idle = q_value(&params, &last.obs, &ActionCommand::noop(), None).unwrap().q_value;
    let qe_ins = q_evaluator(&params, &last.obs, None).unwrap();
    let (_, v_ins) = cem_maximize(qe_ins, &cem, 98).unwrap();
    // value of "wandering": max Q at the episode's first observation
    let qe = q_evaluator(&params, &ep.transitions[0].obs, None).unwrap();
    let (_, v0) = cem_maximize(qe, &cem, 99).unwrap();
    println!(
        "len={n} Q(start)={:+.4} Q(mid)={:+.4} Q(pre-release)={:+.4} Q(success,terminate)={:+.4} maxQ(start)={:+.4} Q(start,terminate)={:+.4} Q(ins,noop)={:+.4} maxQ(ins)={:+.4}",
        q_at(0), q_at(n / 2), q_at(n - 2), q_term, v0, q_term_start, q_idle, v_ins
    );
}
