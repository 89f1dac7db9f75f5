#![allow(dead_code)]

use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_eaas");

pub fn eaas(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run eaas")
}

pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

/// A `serve` child process, killed on drop.
pub struct Server {
    pub child: Child,
    pub url: String,
}

impl Server {
    pub fn start(port: u16, extra: &[&str]) -> Server {
        let port_s = port.to_string();
        let mut args = vec!["serve", "--port", &port_s];
        args.extend_from_slice(extra);
        let child = Command::new(BIN)
            .args(&args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn serve");
        let url = format!("http://127.0.0.1:{port}");
        let started = Instant::now();
        while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
            assert!(started.elapsed() < Duration::from_secs(10), "server did not come up");
            std::thread::sleep(Duration::from_millis(20));
        }
        Server { child, url }
    }

    pub fn with_data(port: u16, dir: &Path) -> Server {
        Server::start(port, &["--data", dir.to_str().unwrap()])
    }

    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A bundled scenario sped up for live runs.
pub fn live_script(dir: &Path, name: &str, accel: f64) -> String {
    let mut v: serde_json::Value =
        serde_json::from_str(eaas_cli::scenario::bundled(name).unwrap()).unwrap();
    v["params"]["time_acceleration"] = serde_json::json!(accel);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}
