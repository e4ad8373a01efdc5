mod common;

use common::{drive, fast_fixtures, replay_session, Script, TestServer, SECRET};
use loopstage_core::config::verify_completion_code;
use loopstage_core::env::Action;
use loopstage_core::protocol::{ActSubmit, Heartbeat, Join, Payload};
use reqwest::StatusCode;
use serde_json::{json, Value};

fn script(study: &str, pid: &str, seed: u64) -> Script {
    Script {
        study: study.into(),
        pid: pid.into(),
        reconnect_after: None,
        seed,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn every_study_runs_to_completion_over_sockets() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let studies = [
        "coverage-teaming",
        "mountain-car-delegation",
        "maze-reward-annotation",
        "dst-utility-elicitation",
    ];
    let runs = studies.iter().enumerate().map(|(i, s)| drive(&server, script(s, &format!("participant-{i}"), i as u64)));
    let outcomes = futures::future::join_all(runs).await;
    for (i, (study, out)) in studies.iter().zip(&outcomes).enumerate() {
        assert_eq!(out.end.reason, "completed", "{study}: {:?}", out.errors);
        let code = out.end.completion_code.as_deref().expect("recruited participants get a code");
        assert!(verify_completion_code(code, study, &format!("participant-{i}"), SECRET));
        assert!(out.end.redirect.as_deref().unwrap().ends_with(code));
        let hashes = replay_session(&server, &out.session_id).unwrap();
        assert!(hashes > 0);
        let log = std::fs::read_to_string(server.dir.path().join("logs").join(format!("{}.jsonl", out.session_id))).unwrap();
        assert!(!log.contains(code), "completion codes stay out of the log");
        assert!(!log.contains(&format!("\"participant-{i}\"")), "participant ids stay out of the log");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dropped_socket_resumes_the_same_seat() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let mut s = script("coverage-teaming", "p-resume", 3);
    s.reconnect_after = Some(8);
    let out = drive(&server, s).await;
    assert!(out.resumed);
    assert_eq!(out.role, "navigator");
    assert_eq!(out.end.reason, "completed");
    replay_session(&server, &out.session_id).unwrap();
}

#[tokio::test]
async fn admin_api_requires_the_bearer_token() {
    let server = TestServer::start(fast_fixtures(), Some("sekret")).await;
    let http = TestServer::http();
    let create = json!({ "study": "coverage-teaming", "master_seed": 11 });

    let denied = http.post(server.url("/admin/sessions")).json(&create).send().await.unwrap();
    assert_eq!(denied.status(), StatusCode::UNAUTHORIZED);
    let wrong = http
        .post(server.url("/admin/sessions"))
        .bearer_auth("nope")
        .json(&create)
        .send()
        .await
        .unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);

    let created = http
        .post(server.url("/admin/sessions"))
        .bearer_auth("sekret")
        .json(&create)
        .send()
        .await
        .unwrap();
    assert_eq!(created.status(), StatusCode::CREATED);
    let info: Value = created.json().await.unwrap();
    let id = info["session_id"].as_str().unwrap().to_string();
    assert_eq!(info["study_id"], "coverage-teaming");
    assert_eq!(info["open_seats"], 1);
    assert_eq!(info["ended"], false);

    let list: Value = http
        .get(server.url("/admin/sessions"))
        .bearer_auth("sekret")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(list.as_array().unwrap().len(), 1);

    let ended: Value = http
        .post(server.url(&format!("/admin/sessions/{id}/end")))
        .bearer_auth("sekret")
        .json(&json!({ "reason": "operator" }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(ended["ended"], true);
    assert_eq!(ended["open_seats"], 0);

    let late = http
        .get(server.url(&format!("/join?study=coverage-teaming&pid=x&session={id}&format=json")))
        .send()
        .await
        .unwrap();
    assert_eq!(late.status(), StatusCode::CONFLICT);

    let missing = http
        .get(server.url("/admin/sessions/nope"))
        .bearer_auth("sekret")
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    replay_session(&server, &id).unwrap();
}

#[tokio::test]
async fn join_redirects_to_the_participant_ui() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let http = TestServer::http();
    let resp = http
        .get(server.url("/join?study=coverage-teaming&pid=a%20b"))
        .send()
        .await
        .unwrap();
    assert!(resp.status().is_redirection());
    let location = resp.headers()["location"].to_str().unwrap().to_string();
    assert!(location.starts_with("/?session=coverage-teaming-"), "{location}");
    assert!(location.contains("&token="));

    // The same participant gets the same seat back.
    let again = http
        .get(server.url("/join?study=coverage-teaming&pid=a%20b"))
        .send()
        .await
        .unwrap();
    assert_eq!(again.headers()["location"].to_str().unwrap(), location);

    // One seat per session, so a second participant opens a new session.
    let (other, _) = server.join("coverage-teaming", "c", None).await;
    assert!(!location.contains(&other));

    let bad = http.get(server.url("/join?study=nope&pid=a")).send().await.unwrap();
    assert_eq!(bad.status(), StatusCode::NOT_FOUND);
    let no_pid = http.get(server.url("/join?study=coverage-teaming")).send().await.unwrap();
    assert_eq!(no_pid.status(), StatusCode::BAD_REQUEST);

    let index = http.get(server.url("/")).send().await.unwrap();
    assert_eq!(index.status(), StatusCode::OK);
    assert!(index.text().await.unwrap().contains("<html"));
    let health = http.get(server.url("/healthz")).send().await.unwrap();
    assert_eq!(health.text().await.unwrap(), "ok");
}

#[tokio::test]
async fn bad_frames_are_answered_without_harming_the_session() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let (session_id, token) = server.join("coverage-teaming", "p", None).await;
    let mut client = server.connect(&session_id).await;

    client.send_raw("{not json".into()).await;
    let err = client.until(|_| true).await;
    assert!(matches!(&err.payload, Payload::Error(e) if e.code == "MalformedFrame"), "{err:?}");

    client.send("navigator", None, Payload::Heartbeat(Heartbeat {})).await;
    let beat = client.until(|_| true).await;
    assert!(matches!(beat.payload, Payload::Heartbeat(_)));

    let early = Payload::ActSubmit(ActSubmit {
        action: Action::discrete(0),
        role: None,
        intention: None,
    });
    client.send("navigator", Some(0), early).await;
    let err = client.until(|_| true).await;
    assert!(matches!(&err.payload, Payload::Error(e) if e.code == "ProtocolViolation"), "{err:?}");

    client
        .send("", None, Payload::Join(Join { token: "forged".into(), role: None }))
        .await;
    let err = client.until(|_| true).await;
    assert!(matches!(&err.payload, Payload::Error(e) if e.code == "UnknownToken"), "{err:?}");

    client.send("", None, Payload::Join(Join { token, role: None })).await;
    let ack = client.until(|e| matches!(e.payload, Payload::JoinAck(_))).await;
    let Payload::JoinAck(ack) = ack.payload else { unreachable!() };
    assert_eq!(ack.role, "navigator");

    // Speaking for another role is refused once bound.
    client.send("partner", None, Payload::Heartbeat(Heartbeat {})).await;
    client.send("partner", Some(0), Payload::ActSubmit(ActSubmit {
        action: Action::discrete(0),
        role: None,
        intention: None,
    }))
    .await;
    let err = client.until(|e| matches!(e.payload, Payload::Error(_))).await;
    assert!(matches!(&err.payload, Payload::Error(e) if e.code == "ProtocolViolation"), "{err:?}");

    client.close().await;
    let status = server.state.status(&session_id).await.unwrap();
    assert!(!status.halted);
    replay_session(&server, &session_id).unwrap();
}

#[tokio::test]
async fn a_second_socket_for_the_same_seat_replaces_the_first() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let (session_id, token) = server.join("maze-reward-annotation", "p", None).await;
    let mut first = server.connect(&session_id).await;
    first.send("", None, Payload::Join(Join { token: token.clone(), role: None })).await;
    first.until(|e| matches!(e.payload, Payload::JoinAck(_))).await;

    let mut second = server.connect(&session_id).await;
    second
        .send("annotator", None, Payload::Join(Join { token, role: Some("annotator".into()) }))
        .await;
    let ack = second.until(|e| matches!(e.payload, Payload::JoinAck(_))).await;
    assert!(matches!(&ack.payload, Payload::JoinAck(a) if a.resumed));

    // The first socket is closed by the server.
    while first.recv().await.is_some() {}
    second.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn a_participant_who_drops_before_the_end_still_gets_a_code() {
    let server = TestServer::start(fast_fixtures(), None).await;
    let (session_id, token) = server.join("maze-reward-annotation", "late", None).await;
    let mut client = server.connect(&session_id).await;
    client.send("", None, Payload::Join(Join { token: token.clone(), role: None })).await;
    client.until(|e| matches!(e.payload, Payload::JoinAck(_))).await;
    client.close().await;

    // The learner plays on without the annotator.
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(30);
    while !server.state.status(&session_id).await.unwrap().status.ended {
        assert!(std::time::Instant::now() < deadline, "session never ended");
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }

    let (same, again) = server.join("maze-reward-annotation", "late", Some(&session_id)).await;
    assert_eq!((same.as_str(), again.as_str()), (session_id.as_str(), token.as_str()));
    let mut client = server.connect(&session_id).await;
    client.send("annotator", None, Payload::Join(Join { token, role: None })).await;
    let end = client.until(|e| matches!(e.payload, Payload::SessionEnd(_))).await;
    let Payload::SessionEnd(end) = end.payload else { unreachable!() };
    assert_eq!(end.reason, "completed");
    assert!(verify_completion_code(
        end.completion_code.as_deref().unwrap(),
        "maze-reward-annotation",
        "late",
        SECRET
    ));
    assert!(client.recv().await.is_none());
    replay_session(&server, &session_id).unwrap();
}
