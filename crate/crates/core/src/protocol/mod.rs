//! Three-party deployment: a third party provisions the key and the
//! transformed model, a provider serves encrypted inference, and a client
//! encrypts locally and queries over TCP.

mod client;
mod server;
pub mod wire;

use std::path::Path;

use thiserror::Error;

use crate::cipher::io::write_key;
use crate::cipher::{generate_orthogonal, CipherError, SecretKey};
use crate::codec::FormatError;
use crate::model::io::{read_model, write_model};
use crate::model::{transform_model, ModelError};
use crate::nnengine::EngineError;

pub use client::{client_infer, Client, KeyedClient, DEFAULT_TIMEOUT};
pub use server::{serve, Provider, ServerHandle};
pub use wire::{ErrorCode, ErrorMessage, InferRequest, InferResponse, WireMessage, MAX_PAYLOAD};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type byte {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("server error {code:?}: {detail}")]
    Remote { code: ErrorCode, detail: String },
    #[error("refusing to serve a plain (untransformed) model")]
    PlainModel,
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Third-party step: derives the key from `seed`, transforms the plain model
/// at `plain_model`, and writes the key and the transformed model. The input
/// file is only read.
pub fn thirdparty_provision(
    seed: u64,
    patch: usize,
    channels: usize,
    plain_model: impl AsRef<Path>,
    key_out: impl AsRef<Path>,
    model_out: impl AsRef<Path>,
) -> Result<SecretKey, ProtocolError> {
    let key = SecretKey::new(seed, patch, channels)?;
    let model = read_model(plain_model)?;
    let g = model.geometry;
    if g.patch != patch || g.channels != channels {
        return Err(ProtocolError::Geometry(format!(
            "key is for block size {patch} with {channels} channels, model uses {} and {}",
            g.patch, g.channels
        )));
    }
    let transformed = transform_model(&model, &generate_orthogonal(&key))?;
    write_key(key_out, &key)?;
    write_model(model_out, &transformed)?;
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{encrypt_image, io::read_key, ImageTensor};
    use crate::model::{ConvMixerModel, Geometry};
    use crate::nnengine::forward;
    use crate::rnglinalg::RngState;
    use std::fs;
    use std::time::{Duration, Instant};

    #[test]
    fn provisioning_is_deterministic_and_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let plain_path = dir.path().join("m.cmxm");
        let plain = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(3)).unwrap();
        write_model(&plain_path, &plain).unwrap();
        let before = fs::read(&plain_path).unwrap();

        let out = |tag: &str| (dir.path().join(format!("{tag}.okey")), dir.path().join(format!("{tag}.cmxm")));
        let (k1, m1) = out("a");
        let (k2, m2) = out("b");
        thirdparty_provision(11, 4, 3, &plain_path, &k1, &m1).unwrap();
        thirdparty_provision(11, 4, 3, &plain_path, &k2, &m2).unwrap();
        assert_eq!(fs::read(&k1).unwrap(), fs::read(&k2).unwrap());
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        assert_eq!(fs::read(&plain_path).unwrap(), before);

        let transformed = read_model(&m1).unwrap();
        assert!(transformed.encrypted);
        let a = generate_orthogonal(&read_key(&k1).unwrap());
        let x = ImageTensor::plain(16, 16, 3, (0..768).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        let d = forward(&transformed, &encrypt_image(&x, &a).unwrap()).unwrap().max_abs_diff(&forward(&plain, &x).unwrap());
        assert!(d <= 1e-6, "{d}");
    }

    #[test]
    fn provisioning_rejects_geometry_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let plain_path = dir.path().join("m.cmxm");
        let g = Geometry { patch: 2, ..Geometry::TOY };
        write_model(&plain_path, &ConvMixerModel::init(g, &mut RngState::new(3)).unwrap()).unwrap();
        let r = thirdparty_provision(1, 4, 3, &plain_path, dir.path().join("k"), dir.path().join("t"));
        assert!(matches!(r, Err(ProtocolError::Geometry(_))));
        assert!(!dir.path().join("k").exists());
    }

    #[test]
    fn unreachable_server_times_out_or_is_refused() {
        // Reserve a port, then close it so nothing listens there.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let start = Instant::now();
        let r = Client::connect(("127.0.0.1", port), Duration::from_millis(500));
        assert!(matches!(r, Err(ProtocolError::Io(_) | ProtocolError::Timeout)));
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn silent_server_triggers_read_timeout() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = std::thread::spawn(move || listener.accept().map(|(s, _)| s));
        let mut c = Client::connect(addr, Duration::from_millis(200)).unwrap();
        let xhat = ImageTensor::encrypted(4, 4, 3, vec![0.0; 48]).unwrap();
        assert!(matches!(c.infer_encrypted(&xhat, 4), Err(ProtocolError::Timeout)));
        drop(hold.join());
    }
}
