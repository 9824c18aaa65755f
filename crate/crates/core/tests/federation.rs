mod common;

use std::net::{TcpListener, TcpStream};
use std::thread;

use dpfl::data::{load_dataset, prepare, split_indices, DatasetKind};
use dpfl::dp::{make_private, PrivacySpec};
use dpfl::error::Error;
use dpfl::federation::{
    decode_message, encode_message, fedavg_aggregate, read_message, run_client, run_server,
    simulate, write_message, ClientRunner, ClientUpdate, FedConfig, FedOutcome, Hyperparams,
    Message, Metrics, SessionReport,
};
use dpfl::matrix::Matrix;
use dpfl::nn::{init_model, serialize_params};
use dpfl::train::{LocalTrainer, TrainConfig};
use proptest::prelude::*;

use common::{cleveland_path, wire};

fn cleveland_train() -> (Matrix, Vec<u8>) {
    let t = load_dataset(DatasetKind::Cleveland, &[cleveland_path()]).unwrap();
    let (tr, te) = split_indices(&t, 0.2, 1).unwrap();
    let p = prepare(&t.select(&tr), &t.select(&te)).unwrap();
    (p.x_train.values, p.y_train.0)
}

fn shards(k: usize) -> Vec<(Matrix, Vec<u8>)> {
    let (x, y) = cleveland_train();
    (0..k)
        .map(|c| {
            let idx: Vec<usize> = (c..y.len()).step_by(k).collect();
            (x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
        })
        .collect()
}

fn config(k: usize, rounds: u32, inputs: usize) -> FedConfig {
    FedConfig {
        clients: k,
        layer_sizes: vec![inputs, 8, 4, 1],
        init_seed: 3,
        hyper: Hyperparams {
            local_epochs: 1,
            total_rounds: rounds,
            train: TrainConfig {
                batch_size: 16,
                lr: 0.01,
                ..TrainConfig::default()
            },
            privacy: Some(PrivacySpec::target(3.0)),
        },
    }
}

fn runners(k: usize) -> Vec<ClientRunner> {
    shards(k)
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| ClientRunner::new(i as u32, x, y, 40 + i as u64).unwrap())
        .collect()
}

fn serve(cfg: FedConfig) -> (String, thread::JoinHandle<dpfl::error::Result<FedOutcome>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || run_server(&listener, &cfg, None));
    (addr, handle)
}

fn over_sockets(cfg: &FedConfig, clients: Vec<ClientRunner>) -> (FedOutcome, Vec<SessionReport>) {
    let (addr, server) = serve(cfg.clone());
    let handles: Vec<_> = clients
        .into_iter()
        .map(|c| {
            let addr = addr.clone();
            thread::spawn(move || run_client(addr, c))
        })
        .collect();
    let reports = handles
        .into_iter()
        .map(|h| h.join().unwrap().unwrap())
        .collect();
    (server.join().unwrap().unwrap(), reports)
}

#[test]
fn socket_session_matches_simulation() {
    let inputs = shards(1)[0].0.cols();
    let cfg = config(3, 3, inputs);
    let (sim, sim_reports) = simulate(&cfg, runners(3), None).unwrap();
    let (net, mut net_reports) = over_sockets(&cfg, runners(3));
    net_reports.sort_by_key(|r| r.client_id);
    assert_eq!(serialize_params(&sim.global), serialize_params(&net.global));
    assert_eq!(sim.log, net.log);
    assert_eq!(sim_reports, net_reports);
    assert!(net_reports.iter().all(|r| r.updates_sent() == 3));
}

#[test]
fn one_client_over_many_rounds_is_centralized_training() {
    let (x, y) = cleveland_train();
    let cfg = config(1, 4, x.cols());
    let runner = ClientRunner::new(0, x.clone(), y.clone(), 8).unwrap();
    let (out, _) = simulate(&cfg, vec![runner], None).unwrap();

    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let dp = make_private(&PrivacySpec::target(3.0), y.len(), 16, 4).unwrap();
    let mut t = LocalTrainer::new(
        init_model(&cfg.layer_sizes, 3).unwrap(),
        cfg.hyper.train,
        Some(dp),
        8,
    )
    .unwrap();
    for _ in 0..4 {
        t.train_epoch(&x, &yf).unwrap();
    }
    assert_eq!(serialize_params(&out.global), serialize_params(&t.params));
}

#[test]
fn duplicate_client_id_is_turned_away() {
    let inputs = shards(1)[0].0.cols();
    let cfg = config(2, 1, inputs);
    let (addr, server) = serve(cfg);
    let mut parts = shards(2).into_iter();
    let (x0, y0) = parts.next().unwrap();
    let (x1, y1) = parts.next().unwrap();

    // Register client 0 by hand so the impostor is certain to come second.
    let mut s0 = TcpStream::connect(&addr).unwrap();
    write_message(&mut s0, &Message::Hello { client_id: 0 }).unwrap();
    assert_eq!(
        read_message(&mut s0).unwrap(),
        Message::Hello { client_id: 0 }
    );
    let first = thread::spawn(move || {
        let mut r = ClientRunner::new(0, x0, y0, 1).unwrap();
        loop {
            match r.handle(read_message(&mut s0).unwrap()).unwrap() {
                Some(reply) => write_message(&mut s0, &reply).unwrap(),
                None => break r.report().clone(),
            }
        }
    });
    let (xd, yd) = shards(2).remove(0);
    match run_client(addr.clone(), ClientRunner::new(0, xd, yd, 2).unwrap()) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("rejected client id 0"), "{msg}"),
        other => panic!("duplicate id was accepted: {other:?}"),
    }
    let second = run_client(addr, ClientRunner::new(1, x1, y1, 3).unwrap()).unwrap();
    assert_eq!(second.updates_sent(), 1);
    assert_eq!(first.join().unwrap().updates_sent(), 1);
    assert_eq!(server.join().unwrap().unwrap().log.len(), 1);
}

#[test]
fn client_vanishing_mid_round_fails_the_round() {
    let inputs = shards(1)[0].0.cols();
    let cfg = config(2, 2, inputs);
    let (addr, server) = serve(cfg);
    let (x, y) = shards(2).remove(0);
    let honest = {
        let addr = addr.clone();
        thread::spawn(move || run_client(addr, ClientRunner::new(0, x, y, 1).unwrap()))
    };
    let mut s = TcpStream::connect(&addr).unwrap();
    write_message(&mut s, &Message::Hello { client_id: 1 }).unwrap();
    assert_eq!(
        read_message(&mut s).unwrap(),
        Message::Hello { client_id: 1 }
    );
    assert!(matches!(
        read_message(&mut s).unwrap(),
        Message::RoundConfig(_)
    ));
    drop(s);

    match server.join().unwrap() {
        Err(Error::RoundFailure { round, reason }) => {
            assert_eq!(round, 1);
            assert!(reason.contains("client 1"), "{reason}");
        }
        other => panic!("expected a round failure, got {other:?}"),
    }
    // The surviving client is told to stop and exits without error.
    assert_eq!(honest.join().unwrap().unwrap().updates_sent(), 1);
}

#[test]
fn shutdown_right_after_ack_ends_cleanly() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let hello = read_message(&mut s).unwrap();
        write_message(&mut s, &hello).unwrap();
        write_message(&mut s, &Message::Shutdown).unwrap();
    });
    let (x, y) = shards(4).remove(0);
    let report = run_client(addr, ClientRunner::new(7, x, y, 0).unwrap()).unwrap();
    fake.join().unwrap();
    assert_eq!(report.client_id, 7);
    assert_eq!(report.updates_sent(), 0);
}

fn updates() -> impl Strategy<Value = Vec<ClientUpdate>> {
    (prop::collection::vec(1usize..5, 2..4), 1usize..6).prop_flat_map(|(sizes, k)| {
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        prop::collection::vec((prop::collection::vec(-10.0f64..10.0, n), 0u32..500), k).prop_map(
            move |cs| {
                cs.into_iter()
                    .enumerate()
                    .map(|(i, (vals, n_i))| {
                        let mut w = dpfl::nn::ModelParams::zeros(&sizes);
                        for (d, v) in w.values_mut().zip(vals) {
                            *d = v;
                        }
                        ClientUpdate {
                            client_id: i as u32,
                            round: 1,
                            num_examples: n_i + u32::from(i == 0),
                            metrics: Metrics::new(),
                            weights: w,
                        }
                    })
                    .collect()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn messages_round_trip_bit_exact(msg in wire::message()) {
        let bytes = encode_message(&msg).unwrap();
        let back = decode_message(&bytes).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(encode_message(&back).unwrap(), bytes);
    }

    #[test]
    fn fedavg_ignores_update_order(ups in updates(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = ups.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let a = fedavg_aggregate(&ups).unwrap();
        let b = fedavg_aggregate(&shuffled).unwrap();
        prop_assert_eq!(serialize_params(&a), serialize_params(&b));

        let total: f64 = ups.iter().map(|u| f64::from(u.num_examples)).sum();
        let weights: Vec<f64> = ups.iter().map(|u| f64::from(u.num_examples) / total).collect();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct: Vec<f64> = (0..a.num_params())
            .map(|j| ups.iter().zip(&weights).map(|(u, w)| w * u.weights.values().nth(j).unwrap()).sum())
            .collect();
        for (x, d) in a.values().zip(direct) {
            prop_assert!((x - d).abs() <= 1e-9 * (1.0 + d.abs()), "{} vs {}", x, d);
        }
    }
}
