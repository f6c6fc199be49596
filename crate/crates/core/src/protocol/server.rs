//! Provider side: holds only the transformed model and answers inference
//! requests on encrypted images.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::wire::{read_frame, write_message, ErrorCode, ErrorMessage, InferResponse, WireMessage};
use super::ProtocolError;
use crate::cipher::io::decode_image;
use crate::cipher::ImageKind;
use crate::model::io::read_model;
use crate::model::ConvMixerModel;
use crate::nnengine::forward;

#[derive(Debug, Clone)]
pub struct Provider {
    model: Arc<ConvMixerModel>,
}

impl Provider {
    /// Refuses plain models: the provider only ever sees transformed ones.
    pub fn new(model: ConvMixerModel) -> Result<Self, ProtocolError> {
        if !model.encrypted {
            return Err(ProtocolError::PlainModel);
        }
        Ok(Self { model: Arc::new(model) })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        Self::new(read_model(path)?)
    }

    pub fn model(&self) -> &ConvMixerModel {
        &self.model
    }

    /// Answers one request payload. Never panics on hostile input.
    pub fn handle(&self, image_bytes: &[u8]) -> WireMessage {
        let fail = |code, detail: String| WireMessage::Error(ErrorMessage { code, detail });
        let (image, patch) = match decode_image(image_bytes) {
            Ok(v) => v,
            Err(e) => return fail(ErrorCode::Malformed, e.to_string()),
        };
        if image.kind() != ImageKind::Encrypted {
            return fail(ErrorCode::Kind, "provider accepts encrypted images only".into());
        }
        let g = self.model.geometry;
        if patch != g.patch
            || image.channels() != g.channels
            || image.height() % g.patch != 0
            || image.width() % g.patch != 0
        {
            return fail(
                ErrorCode::Geometry,
                format!(
                    "image {}x{}x{} with block size {patch} does not fit model block size {} and {} channels",
                    image.height(),
                    image.width(),
                    image.channels(),
                    g.patch,
                    g.channels
                ),
            );
        }
        match forward(&self.model, &image) {
            Ok(logits) => WireMessage::InferResponse(InferResponse::from_logits(logits)),
            Err(e) => fail(ErrorCode::Geometry, e.to_string()),
        }
    }

    /// Serves one connection until the peer closes it or the framing breaks.
    pub fn handle_connection(&self, stream: TcpStream) -> Result<(), ProtocolError> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let reply = match read_frame(&mut reader) {
                Ok(None) => return Ok(()),
                Ok(Some((type_byte, payload))) => match WireMessage::from_parts(type_byte, payload) {
                    Ok(WireMessage::InferRequest(req)) => self.handle(&req.image),
                    Ok(_) => malformed("only inference requests are accepted".into()),
                    Err(e) => malformed(e.to_string()),
                },
                Err(e @ (ProtocolError::Oversize(_) | ProtocolError::Malformed(_))) => {
                    // The stream position is unknown after this; reply and hang up.
                    let _ = write_message(&mut writer, &malformed(e.to_string()));
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            write_message(&mut writer, &reply)?;
        }
    }
}

fn malformed(detail: String) -> WireMessage {
    WireMessage::Error(ErrorMessage { code: ErrorCode::Malformed, detail })
}

/// A running server. Dropping the handle without calling
/// [`ServerHandle::shutdown`] leaves the accept loop running.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Sessions already in progress finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `addr` and serves on a background thread, one thread per
/// connection.
pub fn serve(provider: Provider, addr: impl ToSocketAddrs) -> Result<ServerHandle, ProtocolError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let p = provider.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = p.handle_connection(stream) {
                    log::warn!("session {peer:?} ended: {e}");
                }
            });
        }
    });
    log::info!("serving on {local}");
    Ok(ServerHandle { addr: local, stop, accept: Some(accept) })
}
