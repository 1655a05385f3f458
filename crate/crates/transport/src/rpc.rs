//! Request/response plumbing over a frame link.
//!
//! Bodies begin with a request id; a reader thread routes responses to the
//! callers waiting on them, so one session carries any number of
//! outstanding requests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

use crate::frame::{Frame, FrameType};
use crate::handshake::SessionState;
use crate::link::FrameLink;
use crate::TransportError;

pub struct RpcClient {
    link: Arc<dyn FrameLink>,
    session: SessionState,
    pending: Arc<Mutex<Option<HashMap<u64, Sender<Frame>>>>>,
    next_request: AtomicU64,
    _reader: JoinHandle<()>,
}

impl RpcClient {
    /// Wrap an established session; spawns the response router.
    pub fn new(link: Arc<dyn FrameLink>, session: SessionState) -> Self {
        let pending: Arc<Mutex<Option<HashMap<u64, Sender<Frame>>>>> =
            Arc::new(Mutex::new(Some(HashMap::new())));
        let reader = {
            let link = Arc::clone(&link);
            let pending = Arc::clone(&pending);
            std::thread::spawn(move || loop {
                match link.recv() {
                    Ok(frame) => {
                        if frame.body.len() < 8 {
                            continue;
                        }
                        let request_id =
                            u64::from_le_bytes(frame.body[..8].try_into().unwrap());
                        let tx = pending.lock().as_mut().and_then(|map| map.remove(&request_id));
                        if let Some(tx) = tx {
                            let _ = tx.send(frame);
                        }
                    }
                    Err(_) => {
                        // Wake every waiter with a closed channel.
                        *pending.lock() = None;
                        return;
                    }
                }
            })
        };
        Self {
            link,
            session,
            pending,
            next_request: AtomicU64::new(1),
            _reader: reader,
        }
    }

    pub fn session(&self) -> &SessionState {
        &self.session
    }

    /// Send a request and block for its response. The body builder receives
    /// the allocated request id and must place it in the first 8 bytes.
    pub fn call(
        &self,
        frame_type: FrameType,
        body: impl FnOnce(u64) -> Vec<u8>,
    ) -> Result<Frame, TransportError> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let (tx, rx): (Sender<Frame>, Receiver<Frame>) = mpsc::channel();
        {
            let mut pending = self.pending.lock();
            match pending.as_mut() {
                Some(map) => {
                    map.insert(request_id, tx);
                }
                None => return Err(TransportError::Closed),
            }
        }
        let body = body(request_id);
        debug_assert_eq!(u64::from_le_bytes(body[..8].try_into().unwrap()), request_id);
        if let Err(e) = self.link.send(Frame::new(frame_type, self.session.session_id, body)) {
            if let Some(map) = self.pending.lock().as_mut() {
                map.remove(&request_id);
            }
            return Err(e);
        }
        rx.recv().map_err(|_| TransportError::Closed)
    }
}

/// Per-session request handler on the serving side.
pub trait FrameHandler: Send + Sync {
    fn handle(&self, session: &SessionState, frame: Frame) -> Option<Frame>;
}

/// Pump frames from a link through a handler pool until the peer closes.
/// Responses may complete out of order; request ids in bodies keep callers
/// matched.
pub fn serve_link(
    link: Arc<dyn FrameLink>,
    session: SessionState,
    handler: Arc<dyn FrameHandler>,
    workers: usize,
) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let (tx, rx) = mpsc::channel::<Frame>();
        let rx = Arc::new(Mutex::new(rx));
        let mut pool = Vec::new();
        for _ in 0..workers.max(1) {
            let rx = Arc::clone(&rx);
            let link = Arc::clone(&link);
            let handler = Arc::clone(&handler);
            let session = session.clone();
            pool.push(std::thread::spawn(move || loop {
                let frame = {
                    let guard = rx.lock();
                    guard.recv()
                };
                match frame {
                    Ok(frame) => {
                        if let Some(reply) = handler.handle(&session, frame) {
                            if link.send(reply).is_err() {
                                return;
                            }
                        }
                    }
                    Err(_) => return,
                }
            }));
        }
        loop {
            match link.recv() {
                Ok(frame) => {
                    if tx.send(frame).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        drop(tx);
        for worker in pool {
            let _ = worker.join();
        }
    })
}
