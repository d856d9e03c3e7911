use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use gazeteach::config::Config;
use gazeteach::dataset::{validate, Dataset};
use gazeteach::geometry::{CameraIntrinsics, Point3};
use gazeteach::planner::WorkspaceModel;
use gazeteach::scene::{sample_gaze, Scene};
use gazeteach::teach::protocol::{decode_server, Envelope, PROTOCOL_VERSION};
use gazeteach::teach::script::{parse_script, run_script, run_scripted, ScriptError};
use gazeteach::teach::server::serve;
use gazeteach::teach::{ClientMessage, ErrorCode, ServerMessage, SessionState, TeachService};

fn small_config() -> Config {
    let mut c = Config::default();
    c.wrist.intrinsics = CameraIntrinsics::new(172.5, 172.5, 120.0, 67.5, 240, 135).unwrap();
    c.planner.samples = 40;
    c
}

fn scene() -> Arc<Scene> {
    Arc::new(Scene::random_tabletop(11, 4).unwrap())
}

fn gaze_on(scene: &Scene, id: i32) -> ClientMessage {
    let p = sample_gaze(scene, id, 0.0, 1).unwrap();
    ClientMessage::GazeUpdate { x: p.x, y: p.y, z: p.z }
}

fn bodies(v: Vec<Envelope<ServerMessage>>) -> Vec<ServerMessage> {
    v.into_iter().map(|e| e.body).collect()
}

fn has_error(v: &[ServerMessage], code: ErrorCode) -> bool {
    v.iter().any(|m| matches!(m, ServerMessage::Error { code: c, .. } if *c == code))
}

#[test]
fn connect_then_happy_path() {
    let scene = scene();
    let mut svc = TeachService::new(scene.clone(), small_config(), 5).unwrap();
    assert_eq!(bodies(svc.connect()), vec![ServerMessage::StateChanged { state: SessionState::GazeTracking, reason: None }]);
    assert!(svc.handle(1, gaze_on(&scene, 0)).is_empty());
    let out = bodies(svc.tick());
    assert!(matches!(out[0], ServerMessage::Bbox3d { .. }), "{out:?}");
    assert_eq!(svc.state(), SessionState::ObjectProposed);
    svc.handle(2, ClientMessage::SelectObject {});
    assert_eq!(svc.state(), SessionState::Naming);
    // gaze is gated while naming
    assert!(has_error(&bodies(svc.handle(3, gaze_on(&scene, 1))), ErrorCode::InvalidState));
    assert!(has_error(&bodies(svc.handle(4, ClientMessage::ProvideClass { name: "   ".into() })), ErrorCode::EmptyName));
    assert_eq!(svc.state(), SessionState::Naming);
    svc.handle(5, ClientMessage::ProvideClass { name: "mug".into() });
    assert_eq!(svc.state(), SessionState::Recording);
    let out = bodies(svc.wait_recording(None));
    let progress: Vec<f64> = out.iter().filter_map(|m| if let ServerMessage::RecordProgress { fraction } = m { Some(*fraction) } else { None }).collect();
    assert!(progress.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 0.05 + 1e-9), "{progress:?}");
    assert_eq!(*progress.last().unwrap(), 1.0);
    assert!(progress[0] <= 0.05 + 1e-9);
    let done = out.iter().find_map(|m| if let ServerMessage::RecordDone { frame_count, .. } = m { Some(*frame_count) } else { None }).unwrap();
    assert!(done > 0);
    assert_eq!(svc.state(), SessionState::Done);
    // next object
    svc.handle(6, gaze_on(&scene, 1));
    assert_eq!(svc.state(), SessionState::GazeTracking);
    for (a, b) in svc.transitions() {
        assert!(a.can_transition_to(*b), "{a} -> {b}");
    }
}

#[test]
fn latest_gaze_wins() {
    let scene = scene();
    let mut svc = TeachService::new(scene.clone(), small_config(), 5).unwrap();
    svc.connect();
    let mut last = Point3::ZERO;
    for i in 0..100u64 {
        let p = sample_gaze(&scene, (i % 4) as i32, 0.003, i).unwrap();
        last = p;
        svc.handle(i + 1, ClientMessage::GazeUpdate { x: p.x, y: p.y, z: p.z });
    }
    svc.tick();
    assert_eq!(svc.consumed_gazes(), &[last]);
}

#[test]
fn protocol_errors_keep_state() {
    let mut svc = TeachService::new(scene(), small_config(), 5).unwrap();
    // before connect nothing is selectable
    assert!(has_error(&bodies(svc.handle(1, ClientMessage::SelectObject {})), ErrorCode::InvalidState));
    assert_eq!(svc.state(), SessionState::Idle);
    svc.connect();
    let out = bodies(svc.handle_text(r#"{"v":1,"seq":1,"type":"dance"}"#));
    assert!(has_error(&out, ErrorCode::UnknownType));
    let out = bodies(svc.handle_text(r#"{"v":1,"seq":1,"type":"cancel"}"#));
    assert!(has_error(&out, ErrorCode::BadSequence));
    let out = bodies(svc.handle_text(r#"{"v":9,"seq":2,"type":"cancel"}"#));
    assert!(has_error(&out, ErrorCode::UnsupportedVersion));
    let out = bodies(svc.handle_text("{"));
    assert!(has_error(&out, ErrorCode::Malformed));
    let out = bodies(svc.handle_text(r#"{"v":1,"seq":3,"type":"cancel"}"#));
    assert!(has_error(&out, ErrorCode::InvalidState));
    assert_eq!(svc.state(), SessionState::GazeTracking);
}

#[test]
fn empty_table_gaze_gives_no_object() {
    let scene = scene();
    let mut svc = TeachService::new(scene, small_config(), 5).unwrap();
    svc.connect();
    svc.handle(1, ClientMessage::GazeUpdate { x: 0.0, y: -0.45, z: 0.0 });
    assert_eq!(bodies(svc.tick()), vec![ServerMessage::NoObject {}]);
    assert_eq!(svc.state(), SessionState::GazeTracking);
}

#[test]
fn out_of_reach_fails() {
    let scene = scene();
    let mut cfg = small_config();
    cfg.planner.workspace = WorkspaceModel { min_height: 5.0, max_height: 6.0, ..WorkspaceModel::default() };
    let mut svc = TeachService::new(scene.clone(), cfg, 5).unwrap();
    svc.connect();
    svc.handle(1, gaze_on(&scene, 0));
    svc.tick();
    svc.handle(2, ClientMessage::SelectObject {});
    let out = bodies(svc.handle(3, ClientMessage::ProvideClass { name: "mug".into() }));
    assert!(has_error(&out, ErrorCode::OutOfReach));
    assert_eq!(svc.state(), SessionState::Failed);
    assert!(out.contains(&ServerMessage::StateChanged { state: SessionState::Failed, reason: Some("object out of reach".into()) }));
    // reconnecting starts a fresh session
    svc.connect();
    assert_eq!(svc.state(), SessionState::GazeTracking);
}

#[test]
fn scripted_cancel_persists_partial_session() {
    let scene = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.txt");
    std::fs::write(&script, "gaze_at 0\nselect\ncancel_at 0.5\nclass mug\nwait\n").unwrap();
    let out = dir.path().join("ds");
    let report = run_scripted(&script, scene, small_config(), 3, &out).unwrap();
    assert_eq!(report.sessions.len(), 1);
    let s = &report.sessions[0];
    assert!(s.cancelled);
    assert_eq!(s.frames + s.skipped, 20);
    assert!(report.log.iter().any(|e| e.body == ServerMessage::StateChanged { state: SessionState::Failed, reason: Some("cancelled".into()) }));
    let ds = Dataset::open(&out).unwrap();
    assert_eq!(ds.stats().unwrap().total(), s.frames);
    assert!(validate(&out).is_ok());
}

#[test]
fn two_objects_two_entities_and_reproducible() {
    let scene = scene();
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.txt");
    std::fs::write(&script, "# two objects\ngaze_at 0 0.002\nselect\nclass mug\nwait\ngaze_at 2\nselect\nclass mug\nwait\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = run_scripted(&script, scene.clone(), small_config(), 9, &a).unwrap();
    run_scripted(&script, scene, small_config(), 9, &b).unwrap();
    assert_eq!(ra.objects_taught(), 2);
    let ds = Dataset::open(&a).unwrap();
    let entities: Vec<u32> = ds.manifest.sessions.iter().map(|s| s.entity).collect();
    assert_eq!(entities, vec![0, 1]);
    let files = |root: &std::path::Path| {
        let mut v: Vec<(std::path::PathBuf, Vec<u8>)> =
            walk(root).into_iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn script_action_errors_name_the_line() {
    let scene = scene();
    let mut svc = TeachService::new(scene.clone(), small_config(), 5).unwrap();
    let script = parse_script("# nothing proposed yet\nselect\n").unwrap();
    match run_script(&script, &mut svc, &scene, 0) {
        Err(ScriptError::Action { line: 2, code: ErrorCode::InvalidState, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn websocket_endpoint() {
    use tungstenite::{connect, Message};
    let scene = scene();
    let svc = TeachService::new(scene.clone(), small_config(), 5).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let server = std::thread::spawn(move || serve(listener, svc, stop2).unwrap());

    let url = format!("ws://{addr}");
    let (mut ws, _) = connect(&url).unwrap();
    let next = |ws: &mut tungstenite::WebSocket<_>| loop {
        if let Message::Text(t) = ws.read().unwrap() {
            return decode_server(t.as_str()).unwrap();
        }
    };
    let first = next(&mut ws);
    assert_eq!(first.body, ServerMessage::StateChanged { state: SessionState::GazeTracking, reason: None });
    assert_eq!(first.v, PROTOCOL_VERSION);

    // a second client is turned away
    let (mut ws2, _) = connect(&url).unwrap();
    let busy = next(&mut ws2);
    assert!(matches!(busy.body, ServerMessage::Error { code: ErrorCode::Busy, .. }));

    ws.send(Message::text(r#"{"v":1,"seq":1,"type":"teleport"}"#)).unwrap();
    let e = next(&mut ws);
    assert!(matches!(e.body, ServerMessage::Error { code: ErrorCode::UnknownType, .. }));
    assert!(e.seq > first.seq);

    let g = sample_gaze(&scene, 1, 0.0, 0).unwrap();
    ws.send(Message::text(format!(r#"{{"v":1,"seq":2,"type":"gaze_update","x":{},"y":{},"z":{}}}"#, g.x, g.y, g.z))).unwrap();
    let m = next(&mut ws);
    assert!(matches!(m.body, ServerMessage::Bbox3d { .. }), "{m:?}");
    let m = next(&mut ws);
    assert_eq!(m.body, ServerMessage::StateChanged { state: SessionState::ObjectProposed, reason: None });

    ws.send(Message::text(r#"{"v":1,"seq":3,"type":"request_snapshot"}"#)).unwrap();
    match next(&mut ws).body {
        ServerMessage::Snapshot(s) => {
            assert_eq!((s.width, s.height), (640, 480));
            use base64::Engine;
            let depth = base64::engine::general_purpose::STANDARD.decode(&s.depth_mm_base64).unwrap();
            assert_eq!(depth.len(), 640 * 480 * 2);
        }
        other => panic!("{other:?}"),
    }
    ws.close(None).unwrap();
    stop.store(true, Ordering::SeqCst);
    let svc = server.join().unwrap();
    assert_eq!(svc.state(), SessionState::ObjectProposed);
}

#[test]
fn interactive_and_scripted_runs_agree() {
    use gazeteach::dataset::DatasetWriter;
    use tungstenite::{connect, Message};
    let scene = scene();
    let config = small_config();
    let g = sample_gaze(&scene, 2, 0.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ws_root, script_root) = (dir.path().join("ws"), dir.path().join("script"));

    let writer = DatasetWriter::create(&ws_root, config.wrist.intrinsics).unwrap();
    let svc = TeachService::new(scene.clone(), config.clone(), 5).unwrap().with_dataset(writer);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let server = std::thread::spawn(move || serve(listener, svc, stop2).unwrap());
    let (mut ws, _) = connect(format!("ws://{addr}")).unwrap();
    let mut interactive = Vec::new();
    let mut read_until = |ws: &mut tungstenite::WebSocket<_>, done: &dyn Fn(&ServerMessage) -> bool| loop {
        if let Message::Text(t) = ws.read().unwrap() {
            let body = decode_server(t.as_str()).unwrap().body;
            let stop = done(&body);
            interactive.push(body);
            if stop {
                return;
            }
        }
    };
    let state_is = |s: SessionState| move |m: &ServerMessage| matches!(m, ServerMessage::StateChanged { state, .. } if *state == s);
    read_until(&mut ws, &state_is(SessionState::GazeTracking));
    ws.send(Message::text(format!(r#"{{"v":1,"seq":1,"type":"gaze_update","x":{},"y":{},"z":{}}}"#, g.x, g.y, g.z))).unwrap();
    read_until(&mut ws, &state_is(SessionState::ObjectProposed));
    ws.send(Message::text(r#"{"v":1,"seq":2,"type":"select_object"}"#)).unwrap();
    read_until(&mut ws, &state_is(SessionState::Naming));
    ws.send(Message::text(r#"{"v":1,"seq":3,"type":"provide_class","name":"mug"}"#)).unwrap();
    read_until(&mut ws, &state_is(SessionState::Done));
    ws.close(None).unwrap();
    stop.store(true, Ordering::SeqCst);
    server.join().unwrap().into_dataset().unwrap();

    let script = parse_script(&format!("set_gaze {} {} {}\nselect\nclass mug\nwait\n", g.x, g.y, g.z)).unwrap();
    let writer = DatasetWriter::create(&script_root, config.wrist.intrinsics).unwrap();
    let mut svc = TeachService::new(scene.clone(), config, 5).unwrap().with_dataset(writer);
    let report = run_script(&script, &mut svc, &scene, 0).unwrap();
    drop(svc);

    // progress events depend on polling cadence; everything else must match
    let strip = |v: Vec<ServerMessage>| -> Vec<ServerMessage> { v.into_iter().filter(|m| !matches!(m, ServerMessage::RecordProgress { .. })).collect() };
    assert_eq!(strip(interactive), strip(report.log.into_iter().map(|e| e.body).collect()));
    let files = |root: &std::path::Path| -> Vec<(std::path::PathBuf, Vec<u8>)> {
        let mut v: Vec<_> = walk(root).into_iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
        v.sort();
        v
    };
    let a = files(&ws_root);
    assert!(a.len() > 40);
    assert_eq!(a, files(&script_root));
}
