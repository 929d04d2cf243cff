//! Loopback HTTP server that serves a directory, for exercising remote
//! staging in tests without leaving the machine.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Response, Server, StatusCode};

pub struct FixtureServer {
    server: Arc<Server>,
    addr: SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl FixtureServer {
    /// Serves files under `root` on an ephemeral loopback port. Paths that
    /// do not name a regular file under `root` get a 404.
    pub fn serve_dir(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        let server = Server::http("127.0.0.1:0").map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("fixture server has no IP address"))?;
        let server = Arc::new(server);
        let srv = server.clone();
        let handle = std::thread::Builder::new().name("fixture-http".into()).spawn(move || {
            for request in srv.incoming_requests() {
                let path = request.url().split('?').next().unwrap_or("/").to_string();
                let response = match resolve(&root, &path).and_then(|p| fs::read(p).ok()) {
                    Some(body) => Response::from_data(body)
                        .with_header(Header::from_bytes("Content-Type", "application/octet-stream").unwrap()),
                    None => Response::from_data(b"not found".to_vec()).with_status_code(StatusCode(404)),
                };
                let _ = request.respond(response);
            }
        })?;
        Ok(Self {
            server,
            addr,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, name: &str) -> String {
        format!("http://{}/{}", self.addr, name.trim_start_matches('/'))
    }
}

fn resolve(root: &Path, url_path: &str) -> Option<PathBuf> {
    let rel = Path::new(url_path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let full = root.join(rel);
    full.is_file().then_some(full)
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
