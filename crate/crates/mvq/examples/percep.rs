// Balanced supervised probe: can a fresh net at a given resolution learn to
// discriminate Q(obs, terminate) between inserted-success states (+1) and
// ordinary mid-episode states (-0.01)? Isolates perception capacity from RL
// data-balance effects.
use mvq::arch::q_value;
use mvq::cem::CemConfig;
use mvq::config::TrainConfig;
use mvq::replay::Transition;
use mvq::sim::{ActionCommand, Task, TaskConfig};
use mvq::trainer::{collect_episode, mix, train_step, PolicySource, TrainState};

fn main() {
    let res: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(16);
    let steps: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);
    let task = TaskConfig::new(Task::Insertion);
    let cem = CemConfig::default();
    let mut term = ActionCommand::noop();
    term.terminate = true;

    let n_each: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(40);
    let mut pos: Vec<Transition> = Vec::new();
    let mut neg: Vec<Transition> = Vec::new();
    let mut seed = 0u64;
    while pos.len() < n_each {
        let ep = collect_episode(
            PolicySource::Scripted,
            &task,
            &cem,
            res,
            false,
            mix(4242, seed),
        )
        .unwrap();
        seed += 1;
        let n = ep.transitions.len();
        if ep.success {
            let mut t = ep.transitions[n - 1].clone();
            t.action = term.clone();
            pos.push(t);
        }
        if n > 4 && neg.len() < n_each {
            let mut t = ep.transitions[n / 2].clone();
            t.action = term.clone();
            neg.push(t);
        }
    }
    let n_train = n_each - n_each / 4;
    let (ptr, pte) = pos.split_at(n_train);
    let (ntr, nte) = neg.split_at(n_train);

    let mut cfg = TrainConfig::default();
    cfg.resolution = res;
    cfg.seed = 7;
    let mut state = TrainState::new(&cfg);
    for s in 0..steps {
        let mut batch = Vec::new();
        let mut targets = Vec::new();
        for i in 0..4 {
            batch.push(ptr[(s * 4 + i) % ptr.len()].clone());
            targets.push(1.0);
            batch.push(ntr[(s * 4 + i) % ntr.len()].clone());
            targets.push(-0.01);
        }
        let (ns, loss) = train_step(state, &batch, &targets, &cfg).unwrap();
        state = ns;
        if s % 100 == 0 {
            println!("step {s} loss {loss:.5}");
        }
    }
    let q = |t: &Transition| {
        q_value(&state.online, &t.obs, &t.action, None)
            .unwrap()
            .q_value
    };
    let mp: f64 = pte.iter().map(|t| q(t)).sum::<f64>() / pte.len() as f64;
    let mn: f64 = nte.iter().map(|t| q(t)).sum::<f64>() / nte.len() as f64;
    let correct = pte.iter().filter(|t| q(t) > 0.5).count()
        + nte.iter().filter(|t| q(t) < 0.5).count();
    println!(
        "res {res}: held-out mean Q pos {mp:+.3} neg {mn:+.3} sep {:.3} acc {}/{}",
        mp - mn,
        correct,
        pte.len() + nte.len()
    );
}
