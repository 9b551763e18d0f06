use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use workbench::action::CommandVocabulary;
use workbench::corpus::record_corpus;
use workbench::robot::default_model;
use workbench::service::{Server, ServiceConfig};

struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    fn connect(server: &Server) -> Self {
        let stream = TcpStream::connect(server.local_addr()).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }

    /// Sends a request and returns the reply with the same id, skipping pushes.
    fn call(&mut self, id: i64, kind: &str, payload: Value) -> Value {
        self.send_raw(&json!({"id": id, "type": kind, "payload": payload}).to_string());
        loop {
            let msg = self.next();
            if msg["type"] != "state" && msg["id"] == json!(id) {
                return msg;
            }
        }
    }
}

fn server() -> Server {
    Server::bind("127.0.0.1:0", ServiceConfig::new(default_model())).unwrap()
}

#[test]
fn get_state_reports_every_joint() {
    let server = server();
    let mut c = Client::connect(&server);
    let reply = c.call(1, "get_state", json!({}));
    assert_eq!(reply["type"], "get_state_reply");
    let p = &reply["payload"];
    assert_eq!(p["positions"].as_array().unwrap().len(), 17);
    assert_eq!(p["names"].as_array().unwrap().len(), 17);
    assert!(p["torque"].as_array().unwrap().iter().all(|t| t == true));
    assert!(p["recording"].is_null());
    server.shutdown();
}

#[test]
fn goals_and_torque() {
    let server = server();
    let mut c = Client::connect(&server);
    let reply = c.call(1, "set_goals", json!({"goals": {"neck_yaw": 0.3}}));
    assert_eq!(reply["payload"]["count"], 1);
    std::thread::sleep(Duration::from_millis(600));
    let state = c.call(2, "get_state", json!({}));
    let q = state["payload"]["positions"][0].as_f64().unwrap();
    assert!((q - 0.3).abs() < 0.01, "neck_yaw at {q}");

    let reply = c.call(3, "set_torque", json!({"enabled": false, "joints": ["neck_yaw"]}));
    assert_eq!(reply["type"], "set_torque_reply");
    let state = c.call(4, "get_state", json!({}));
    assert_eq!(state["payload"]["torque"][0], false);
    assert_eq!(state["payload"]["torque"][1], true);

    let reply = c.call(5, "set_goals", json!({"goals": [0.0, 0.0, 0.0]}));
    assert_eq!(reply["type"], "error");
    server.shutdown();
}

#[test]
fn live_teaching_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        action_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::new(default_model())
    };
    let server = Server::bind("127.0.0.1:0", cfg).unwrap();
    let mut c = Client::connect(&server);
    let reply = c.call(1, "start_record", json!({"name": "wave", "rate_hz": 50.0}));
    assert_eq!(reply["type"], "start_record_reply");
    let state = c.call(2, "get_state", json!({}));
    assert!(state["payload"]["torque"].as_array().unwrap().iter().all(|t| t == false));
    assert_eq!(c.call(3, "set_torque", json!({"enabled": true}))["type"], "error");
    assert_eq!(
        c.call(4, "tag_event", json!({"kind": "facial", "command": "smile", "time": 0.5}))["type"],
        "tag_event_reply"
    );
    assert_eq!(
        c.call(5, "tag_event", json!({"kind": "audio", "command": "yay", "time": 99.0}))["type"],
        "tag_event_reply"
    );

    for k in 0..100 {
        let q = 0.4 * (k as f64 / 50.0 * std::f64::consts::PI).sin();
        let reply = c.call(10 + k, "puppet_frame", json!({"positions": {"neck_yaw": q}}));
        assert_eq!(reply["payload"]["frame"], k);
    }
    let reply = c.call(200, "stop_record", json!({}));
    assert_eq!(reply["type"], "stop_record_reply", "{reply}");
    let p = &reply["payload"];
    assert_eq!(p["frames"], 100);
    let last = |key: &str| p[key].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last("facial_events")["frame"], 25);
    assert_eq!(last("audio_events")["frame"], 99);

    let saved = workbench::action::ActionSequence::load(dir.path().join("wave.json")).unwrap();
    assert_eq!(saved.len(), 100);
    let peak = saved.frames.iter().map(|f| f[0]).fold(f64::MIN, f64::max);
    assert!((peak - 0.4).abs() < 0.01);

    let list = c.call(201, "list_actions", json!({}));
    assert_eq!(list["payload"]["actions"][0]["name"], "wave");
    let state = c.call(202, "get_state", json!({}));
    assert!(state["payload"]["torque"].as_array().unwrap().iter().all(|t| t == true));
    assert_eq!(c.call(203, "stop_record", json!({}))["type"], "error");
    server.shutdown();
}

#[test]
fn teaching_round_trip() {
    // 2 s single-joint ramp at 50 Hz, markers saved and reloaded
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        action_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::new(default_model())
    };
    let server = Server::bind("127.0.0.1:0", cfg).unwrap();
    let mut c = Client::connect(&server);
    c.call(1, "start_record", json!({"name": "ramp", "rate_hz": 50.0}));
    let emitted: Vec<f64> = (0..100).map(|k| -0.5 + 1.0 * k as f64 / 99.0).collect();
    for (k, q) in emitted.iter().enumerate() {
        c.call(10 + k as i64, "puppet_frame", json!({"positions": {"neck_yaw": q}}));
    }
    c.call(200, "tag_event", json!({"kind": "facial", "command": "smile", "time": 0.6}));
    c.call(201, "tag_event", json!({"kind": "audio", "command": "yay", "time": 1.2}));
    let stopped = c.call(202, "stop_record", json!({}));
    server.shutdown();

    let saved = workbench::action::ActionSequence::load(dir.path().join("ramp.json")).unwrap();
    assert_eq!(saved.len(), emitted.len());
    for (frame, q) in saved.frames.iter().zip(&emitted) {
        assert!((frame[0] - q).abs() <= 1e-3, "{} vs {q}", frame[0]);
    }
    assert_eq!(saved.facial_events.last().unwrap().frame, 30);
    assert_eq!(saved.audio_events.last().unwrap().frame, 60);

    let cfg = ServiceConfig {
        actions: vec![saved],
        ..ServiceConfig::new(default_model())
    };
    let server = Server::bind("127.0.0.1:0", cfg).unwrap();
    let mut c = Client::connect(&server);
    let listed = c.call(1, "list_actions", json!({}));
    let reloaded = &listed["payload"]["actions"][0];
    for key in ["facial_events", "audio_events", "frames"] {
        assert_eq!(reloaded[key], stopped["payload"][key], "{key}");
    }
    server.shutdown();
}

#[test]
fn subscription_pushes_at_the_requested_rate() {
    let server = server();
    let mut c = Client::connect(&server);
    let reply = c.call(7, "subscribe_state", json!({"rate_hz": 20.0, "duration_s": 1.0}));
    assert_eq!(reply["type"], "subscribe_state_reply");
    let start = Instant::now();
    let mut pushes = 0;
    loop {
        let msg = c.next();
        assert_eq!(msg["id"], 7);
        match msg["type"].as_str().unwrap() {
            "state" => {
                assert_eq!(msg["payload"]["positions"].as_array().unwrap().len(), 17);
                pushes += 1;
            }
            "subscribe_state_end" => {
                assert_eq!(msg["payload"]["pushes"], pushes);
                break;
            }
            other => panic!("unexpected {other}"),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!((19..=21).contains(&pushes), "{pushes} pushes");
    assert!((0.8..1.5).contains(&elapsed), "{elapsed} s");
    server.shutdown();
}

#[test]
fn open_subscription_runs_until_unsubscribed() {
    let server = server();
    let mut c = Client::connect(&server);
    c.call(1, "subscribe_state", json!({"rate_hz": 20.0}));
    std::thread::sleep(Duration::from_millis(1000));
    let reply = c.call(2, "unsubscribe_state", json!({"subscription": 1}));
    let pushes = reply["payload"]["pushes"].as_u64().unwrap();
    assert!((19..=21).contains(&pushes), "{pushes} pushes");
    assert_eq!(c.call(3, "unsubscribe_state", json!({"subscription": 1}))["type"], "error");
    server.shutdown();
}

#[test]
fn bad_requests_get_error_replies() {
    let server = server();
    let mut c = Client::connect(&server);
    c.send_raw("{not json");
    let msg = c.next();
    assert_eq!(msg["type"], "error");
    assert!(msg["id"].is_null());

    c.send_raw(r#"{"id": 4, "payload": {}}"#);
    let msg = c.next();
    assert_eq!((msg["type"].as_str(), msg["id"].as_i64()), (Some("error"), Some(4)));

    let msg = c.call(5, "launch_rockets", json!({}));
    assert_eq!(msg["type"], "error");
    assert!(msg["payload"]["message"].as_str().unwrap().contains("launch_rockets"));

    let msg = c.call(6, "generate", json!({"sequence": 0}));
    assert_eq!(msg["type"], "error");
    let msg = c.call(7, "puppet_frame", json!({"positions": {}}));
    assert_eq!(msg["type"], "error");

    // The connection survives all of the above.
    assert_eq!(c.call(8, "get_state", json!({}))["type"], "get_state_reply");
    server.shutdown();
}

#[test]
fn concurrent_clients_are_serialized() {
    let server = server();
    let handles: Vec<_> = (0..4)
        .map(|k| {
            let mut c = Client::connect(&server);
            std::thread::spawn(move || {
                for i in 0..50 {
                    let q = 0.01 * (k * 50 + i) as f64;
                    let reply = c.call(i, "set_goals", json!({"goals": {"elbow_r": q}}));
                    assert_eq!(reply["type"], "set_goals_reply");
                    let state = c.call(1000 + i, "get_state", json!({}));
                    assert_eq!(state["payload"]["positions"].as_array().unwrap().len(), 17);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    server.shutdown();
}

#[test]
fn background_training_then_generation() {
    let model = default_model();
    let vocab = CommandVocabulary::default();
    let actions: Vec<_> = record_corpus(&model, &vocab, 50.0).unwrap().into_iter().take(2).collect();
    let (name, length) = (actions[1].name.clone(), actions[1].len());
    let cfg = ServiceConfig {
        actions,
        ..ServiceConfig::new(model)
    };
    let server = Server::bind("127.0.0.1:0", cfg).unwrap();
    let mut c = Client::connect(&server);
    let reply = c.call(1, "start_train", json!({"epochs": 20, "learning_rate": 0.001, "optimizer": "adam", "feedback": 0.5, "posture_init": true}));
    assert_eq!(reply["type"], "start_train_reply", "{reply}");

    let deadline = Instant::now() + Duration::from_secs(120);
    let status = loop {
        // The endpoint stays responsive while the job runs.
        assert_eq!(c.call(2, "get_state", json!({}))["type"], "get_state_reply");
        let status = c.call(3, "train_status", json!({}));
        match status["payload"]["state"].as_str().unwrap() {
            "done" => break status,
            "failed" => panic!("{status}"),
            _ => {}
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(status["payload"]["epoch"], 20);
    let curve = status["payload"]["curve"].as_array().unwrap();
    assert_eq!(curve.last().unwrap()["epoch"], 20);

    let reply = c.call(4, "generate", json!({"sequence": name}));
    assert_eq!(reply["type"], "generate_reply", "{reply}");
    let frames = reply["payload"]["action"]["frames"].as_array().unwrap();
    assert_eq!(frames.len(), length);
    assert_eq!(reply["payload"]["cs"].as_array().unwrap().len(), length);

    let reply = c.call(5, "generate", json!({"sequence": 0, "length": 10}));
    assert_eq!(reply["payload"]["action"]["frames"].as_array().unwrap().len(), 10);
    assert_eq!(c.call(6, "generate", json!({"sequence": 9}))["type"], "error");
    server.shutdown();
}
