//! Starts the operator bridge on a free port, drives a session to REVIEW
//! over the websocket the way the console would, and prints what comes back.
//!
//! ```text
//! cargo run --example ws_bridge
//! ```

use crane::collision::Scene;
use crane::link::DirectLink;
use crane::service::bridge::{serve, spawn_actor};
use crane::service::{PlanMode, Session, SessionConfig, SessionIo};
use futures_util::{SinkExt, StreamExt};
use std::sync::atomic::Ordering;
use tokio_tungstenite::tungstenite::Message;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene: Scene = serde_json::from_str(include_str!("../scenarios/phantom_scene.json"))?;
    let fids: Vec<[f64; 3]> = serde_json::from_str(include_str!("../scenarios/phantom_robot_fiducials.json"))?;
    let cfg = SessionConfig::new(scene, fids);
    let link = Box::new(DirectLink::new(cfg.controller.clone()));
    let session = Session::new(cfg, link, PlanMode::Background, SessionIo::default())?;

    let (handle, actor) = spawn_actor(session, true);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, handle.clone(), None, async {
        stop_rx.await.ok();
    }));
    println!("bridge on ws://{addr}/ws");

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await?;
    let mut sent_target = false;
    let mut last_state = String::new();
    while let Some(msg) = ws.next().await {
        let Message::Text(text) = msg? else { continue };
        let v: serde_json::Value = serde_json::from_str(&text)?;
        if v["type"] != "telemetry" {
            println!("reply: {text}");
            continue;
        }
        let state = v["workflow"].as_str().unwrap_or("?").to_owned();
        if state != last_state {
            println!(
                "t={:.3} s  workflow {state}  safety {}",
                v["t_ns"].as_u64().unwrap_or(0) as f64 * 1e-9,
                v["safety"]["mode"]
            );
            last_state = state.clone();
        }
        if !sent_target && v["safety"]["mode"] == "ENABLED" {
            ws.send(Message::text(r#"{"v":1,"type":"set_target"}"#)).await?;
            sent_target = true;
        }
        if state == "REVIEW" {
            println!("plan preview: {}", v["plan"]);
            break;
        }
    }

    ws.close(None).await.ok();
    stop_tx.send(()).ok();
    server.await??;
    handle.stop.store(true, Ordering::Relaxed);
    drop(handle);
    let session = actor.join().expect("session thread")?;
    println!("session stopped at tick {}", session.tick());
    Ok(())
}
