#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use haptex_service::cli::{self, Command};
use haptex_service::server::{router, AppState, ServeConfig};
use tempfile::TempDir;

pub const SMALL_CONFIG: &str = r#"{
  "dims": {"ar_enc": [32, 16], "tap_enc": [16], "ar_dec": [32], "ar_res": 1,
           "tap_dec": [32], "tap_res": 1, "latent_proj_hidden": 16, "text_proj_hidden": 16},
  "train": {"batch": 16}
}"#;

/// Source corpus, augmented corpus and a briefly trained checkpoint.
pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("cfg.json"), SMALL_CONFIG).unwrap();
        cli::execute(Command::GenCorpus { seed: 4, materials: 20, out: p.join("src") }).unwrap();
        cli::execute(Command::Augment { corpus: p.join("src"), augments: 2, seed: 1, out: p.join("aug") }).unwrap();
        cli::execute(Command::Train {
            corpus: p.join("aug"),
            embeddings: None,
            config: Some(p.join("cfg.json")),
            epochs: Some(2),
            seed: Some(3),
            augments: 0,
            out: p.join("run"),
        })
        .unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn serve_config(&self) -> ServeConfig {
        ServeConfig {
            addr: "127.0.0.1:0".into(),
            checkpoint: self.path("run/model.ckpt"),
            corpus: self.path("src"),
            embeddings: self.path("src/embeddings.json"),
            render_config: None,
        }
    }

    pub fn state(&self) -> Arc<AppState> {
        Arc::new(AppState::load(&self.serve_config()).unwrap())
    }

    /// Start a server on an ephemeral port.
    pub async fn spawn(&self) -> SocketAddr {
        let app = router(self.state());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        addr
    }
}

pub fn file_bytes(path: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries {
            out.extend(file_bytes(&e));
        }
    } else {
        out.push((path.to_path_buf(), std::fs::read(path).unwrap()));
    }
    out
}
