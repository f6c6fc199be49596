//! Client side: encrypts locally and queries the provider. The key and the
//! plain image never leave this process.

use std::io::{BufReader, ErrorKind};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use super::wire::{read_frame, write_message, InferRequest, InferResponse, WireMessage};
use super::ProtocolError;
use crate::cipher::io::{encode_image, read_key, read_ppm};
use crate::cipher::{encrypt_image, generate_orthogonal, ImageKind, ImageTensor, OrthoMatrix, SecretKey};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

fn timeout_aware(e: std::io::Error) -> ProtocolError {
    match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => ProtocolError::Timeout,
        _ => ProtocolError::Io(e),
    }
}

/// One connection; requests are sent strictly one at a time.
#[derive(Debug)]
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    /// `timeout` bounds the connect and every later read and write.
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ProtocolError> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: stream });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map(timeout_aware).unwrap_or_else(|| ProtocolError::Malformed("address resolved to nothing".into())))
    }

    /// Sends an already-encrypted image tagged with its block size.
    pub fn infer_encrypted(&mut self, xhat: &ImageTensor, patch: usize) -> Result<InferResponse, ProtocolError> {
        let req = WireMessage::InferRequest(InferRequest { image: encode_image(xhat, patch) });
        write_message(&mut self.writer, &req).map_err(|e| match e {
            ProtocolError::Io(io) => timeout_aware(io),
            other => other,
        })?;
        let frame = read_frame(&mut self.reader).map_err(|e| match e {
            ProtocolError::Io(io) => timeout_aware(io),
            other => other,
        })?;
        let (t, payload) = frame.ok_or_else(|| ProtocolError::Malformed("server closed the connection".into()))?;
        match WireMessage::from_parts(t, payload)? {
            WireMessage::InferResponse(r) => Ok(r),
            WireMessage::Error(e) => Err(ProtocolError::Remote { code: e.code, detail: e.detail }),
            WireMessage::InferRequest(_) => Err(ProtocolError::Malformed("server sent a request".into())),
        }
    }
}

/// A connection paired with the client's key.
#[derive(Debug)]
pub struct KeyedClient {
    client: Client,
    key: SecretKey,
    a: OrthoMatrix,
}

impl KeyedClient {
    pub fn connect(addr: impl ToSocketAddrs, key: SecretKey, timeout: Duration) -> Result<Self, ProtocolError> {
        Ok(Self { client: Client::connect(addr, timeout)?, key, a: generate_orthogonal(&key) })
    }

    pub fn key(&self) -> &SecretKey {
        &self.key
    }

    /// Encrypts `x` locally and returns the provider's answer.
    pub fn classify(&mut self, x: &ImageTensor) -> Result<InferResponse, ProtocolError> {
        if x.kind() != ImageKind::Plain {
            return Err(crate::cipher::CipherError::Kind("client input must be a plain image".into()).into());
        }
        let xhat = encrypt_image(x, &self.a)?;
        self.client.infer_encrypted(&xhat, self.key.patch)
    }
}

/// Loads the key and a PPM image from disk and runs one remote inference.
pub fn client_infer(
    server: impl ToSocketAddrs,
    key_path: impl AsRef<Path>,
    image_path: impl AsRef<Path>,
) -> Result<InferResponse, ProtocolError> {
    let key = read_key(key_path)?;
    let x = read_ppm(image_path)?;
    KeyedClient::connect(server, key, DEFAULT_TIMEOUT)?.classify(&x)
}
