use futures_util::{SinkExt, StreamExt};
use locoman_core::demos::load_episode;
use locoman_core::harness::Setup;
use locoman_core::ControlMode;
use locoman_teleop::protocol::{
    decode_outbound, encode_inbound, ControlAction, ErrorCode, Inbound, InputMessage, Outbound, Role, StateSnapshot,
    WristPose,
};
use locoman_teleop::{replay_log, serve, ServiceConfig};
use std::path::{Path, PathBuf};
use std::time::Duration;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn config(episodes: &Path) -> ServiceConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenarios/ground_grasp.toml");
    let setup = Setup::from_path(path).unwrap();
    ServiceConfig::from_setup(&setup, episodes).unwrap()
}

async fn connect(addr: std::net::SocketAddr, query: &str) -> Ws {
    let (ws, _) = connect_async(format!("ws://{addr}/teleop{query}")).await.unwrap();
    ws
}

async fn next(ws: &mut Ws) -> Outbound {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server answers")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = frame {
            return decode_outbound(&t).unwrap();
        }
    }
}

async fn next_state(ws: &mut Ws) -> StateSnapshot {
    loop {
        if let Outbound::State(s) = next(ws).await {
            return s;
        }
    }
}

async fn send(ws: &mut Ws, msg: &Inbound) {
    ws.send(Message::Text(encode_inbound(msg))).await.unwrap();
}

/// Scripted operator: reach forward and down, close the hand, drive
/// forward with the joystick, switch to decoupled and lower the body.
fn script() -> Vec<Inbound> {
    let mut log = vec![Inbound::Control {
        seq: Some(0),
        action: ControlAction::RecordStart,
    }];
    for i in 0..120u64 {
        let s = i as f64 / 120.0;
        let mut m = InputMessage::neutral();
        m.seq = Some(i + 1);
        m.wrist_right = WristPose {
            position: [0.1 * s, 0.02 * (3.0 * s).sin(), -0.15 * s],
            quaternion: [1.0, 0.0, 0.1 * s, 0.0],
        };
        m.wrist_left = WristPose::translation([0.05 + 0.1 * s, 0.0, 0.0]);
        m.pinch_left = i % 40 < 30;
        m.pinch_gripper = if i > 80 { 0.01 } else { 0.08 };
        log.push(Inbound::Input(m));
    }
    log.push(Inbound::Control {
        seq: Some(200),
        action: ControlAction::SetMode {
            mode: ControlMode::Decoupled,
        },
    });
    for i in 0..30u64 {
        let mut m = InputMessage::neutral();
        m.seq = Some(201 + i);
        m.body_rates = Some([-0.1, 0.2]);
        log.push(Inbound::Input(m));
    }
    for i in 0..15u64 {
        log.push(Inbound::Step { seq: Some(300 + i) });
    }
    log.push(Inbound::Control {
        seq: Some(400),
        action: ControlAction::RecordStop,
    });
    log.push(Inbound::Step { seq: Some(401) });
    log
}

fn only_file(dir: &Path) -> PathBuf {
    let files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1, "{files:?}");
    files[0].clone()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn socket_session_matches_offline_replay() {
    let online_dir = tempfile::tempdir().unwrap();
    let offline_dir = tempfile::tempdir().unwrap();
    let mut cfg = config(online_dir.path());
    cfg.lockstep = true;
    let server = serve(cfg, "127.0.0.1:0").await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    let Outbound::Welcome(w) = next(&mut ws).await else { panic!("welcome first") };
    assert_eq!(w.role, Role::Controller);
    assert!(w.lockstep);

    let log = script();
    let mut last = None;
    for msg in &log {
        send(&mut ws, msg).await;
        if !matches!(msg, Inbound::Control { .. }) {
            let s = next_state(&mut ws).await;
            assert_eq!(s.ack, msg.seq(), "every inbound frame is acknowledged");
            if let Some(prev) = last.replace(s.tick) {
                assert_eq!(s.tick, prev + 1);
            }
        }
    }
    let online = server.world();
    server.shutdown().await;

    let mut offline_cfg = config(offline_dir.path());
    offline_cfg.lockstep = true;
    let offline = replay_log(offline_cfg, &log).unwrap();
    assert_eq!(online, *offline.world());
    assert_eq!(
        serde_json::to_string(&online).unwrap(),
        serde_json::to_string(offline.world()).unwrap()
    );
    assert!(online.robot.base.x > 0.05, "joystick drove the base");
    assert!(online.robot.body_height < 0.55, "decoupled body rates applied");

    let a = only_file(online_dir.path());
    let b = only_file(offline_dir.path());
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let episode = load_episode(&a).unwrap();
    episode.validate().unwrap();
    assert_eq!(episode.len(), 120 + 30 + 15);
    assert_eq!(episode.metadata.operator_id, "teleop");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_server_holds_still() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    let start = server.world().robot.clone();
    tokio::time::sleep(Duration::from_millis(150)).await;
    let mut ws = connect(server.local_addr(), "?role=viewer").await;
    let Outbound::Welcome(w) = next(&mut ws).await else { panic!() };
    assert_eq!(w.role, Role::Viewer);
    let s = next_state(&mut ws).await;
    assert!(s.tick > 1);
    assert_eq!(s.command.base, [0.0; 3]);
    assert!(s.command.stale && !s.command.ee_target);
    assert_eq!(s.robot.base, [start.base.x, start.base.y, start.base.yaw]);
    assert_eq!(server.world().robot.arm_joints, start.arm_joints);
    let attention = s.attention.expect("thumbnail streamed");
    assert_eq!(attention.values.len(), attention.height * attention.width);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stale_input_decays_to_zero_after_hold() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    next(&mut ws).await;
    let mut m = InputMessage::neutral();
    m.seq = Some(1);
    m.pinch_left = true;
    m.wrist_left = WristPose::translation([0.2, 0.0, 0.0]);
    send(&mut ws, &Inbound::Input(m)).await;
    let mut moving = Vec::new();
    let stale_tick = loop {
        let s = next_state(&mut ws).await;
        if s.command.base != [0.0; 3] {
            assert!(!s.command.stale);
            assert_eq!(s.ack, Some(1));
            moving.push(s.tick);
        } else if !moving.is_empty() {
            assert!(s.command.stale);
            break s.tick;
        }
    };
    // 200 ms at 50 Hz.
    assert_eq!(moving.len(), 10);
    assert_eq!(stale_tick, moving[0] + 10);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn joystick_inside_deadzone_gives_zero_velocity() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    next(&mut ws).await;
    let mut m = InputMessage::neutral();
    m.seq = Some(9);
    m.pinch_left = true;
    m.wrist_left = WristPose::translation([0.04, 0.0, 0.0]);
    send(&mut ws, &Inbound::Input(m)).await;
    let s = loop {
        let s = next_state(&mut ws).await;
        if s.ack == Some(9) {
            break s;
        }
    };
    assert!(!s.command.stale);
    assert_eq!(s.command.base, [0.0; 3]);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_controller_and_per_message_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    let mut controller = connect(server.local_addr(), "").await;
    next(&mut controller).await;

    let mut second = connect(server.local_addr(), "").await;
    let Outbound::Error(e) = next(&mut second).await else { panic!("second controller rejected") };
    assert_eq!(e.code, ErrorCode::ControllerTaken);

    let mut viewer = connect(server.local_addr(), "?role=viewer").await;
    next(&mut viewer).await;
    send(&mut viewer, &Inbound::Step { seq: Some(5) }).await;
    let e = loop {
        if let Outbound::Error(e) = next(&mut viewer).await {
            break e;
        }
    };
    assert_eq!((e.code, e.seq), (ErrorCode::NotController, Some(5)));

    controller.send(Message::Text("{\"v\":1,\"type\":".into())).await.unwrap();
    let e = loop {
        if let Outbound::Error(e) = next(&mut controller).await {
            break e;
        }
    };
    assert_eq!(e.code, ErrorCode::Malformed);
    let mut bad = InputMessage::neutral();
    bad.seq = Some(6);
    bad.wrist_right.quaternion = [0.0; 4];
    send(&mut controller, &Inbound::Input(bad)).await;
    let e = loop {
        if let Outbound::Error(e) = next(&mut controller).await {
            break e;
        }
    };
    assert_eq!((e.code, e.seq), (ErrorCode::Invalid, Some(6)));

    // The session carries on.
    let mut ok = InputMessage::neutral();
    ok.seq = Some(7);
    send(&mut controller, &Inbound::Input(ok)).await;
    loop {
        if let Outbound::State(s) = next(&mut controller).await {
            if s.ack == Some(7) {
                break;
            }
        }
    }
    send(
        &mut controller,
        &Inbound::Control {
            seq: Some(8),
            action: ControlAction::RecordStop,
        },
    )
    .await;
    let e = loop {
        if let Outbound::Error(e) = next(&mut controller).await {
            break e;
        }
    };
    assert_eq!((e.code, e.seq), (ErrorCode::Recording, Some(8)));

    // The seat frees up once the controller leaves.
    controller.close(None).await.unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    let mut third = connect(server.local_addr(), "").await;
    let Outbound::Welcome(w) = next(&mut third).await else { panic!("controller seat released") };
    assert_eq!(w.role, Role::Controller);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn record_toggle_writes_a_valid_episode() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    next(&mut ws).await;
    let control = |seq, action| Inbound::Control { seq: Some(seq), action };
    send(&mut ws, &control(1, ControlAction::RecordStart)).await;
    let mut frames = 0;
    while frames < 20 {
        let s = next_state(&mut ws).await;
        if s.recording.active {
            frames = s.recording.frames;
        }
    }
    send(&mut ws, &control(2, ControlAction::RecordStop)).await;
    let file = loop {
        let s = next_state(&mut ws).await;
        if let Some(f) = s.recording.last_file {
            assert!(!s.recording.active);
            break f;
        }
    };
    let episode = load_episode(&file).unwrap();
    episode.validate().unwrap();
    assert!(episode.len() >= 20);
    assert_eq!(episode.text_queries, vec!["trash".to_string()]);
    server.shutdown().await;
}

#[tokio::test]
async fn other_paths_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(config(dir.path()), "127.0.0.1:0").await.unwrap();
    assert!(connect_async(format!("ws://{}/other", server.local_addr())).await.is_err());
    server.shutdown().await;
}
