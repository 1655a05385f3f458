//! Blocking frame links: an in-process channel pair and a TCP stream, both
//! carrying the same framing.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, Sender};

use parking_lot::Mutex;

use crate::frame::{decode_frame, encode_frame, Frame, FrameError, HEADER_LEN, MAX_BODY_LEN};
use crate::TransportError;

pub trait FrameLink: Send + Sync {
    fn send(&self, frame: Frame) -> Result<(), TransportError>;
    /// Blocking receive; `Err(Closed)` once the peer is gone.
    fn recv(&self) -> Result<Frame, TransportError>;
}

/// In-process link backed by a pair of channels.
pub struct ChannelLink {
    tx: Sender<Frame>,
    rx: Mutex<Receiver<Frame>>,
}

/// Connected pair of in-process links.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (tx_a, rx_a) = mpsc::channel();
    let (tx_b, rx_b) = mpsc::channel();
    (
        ChannelLink {
            tx: tx_a,
            rx: Mutex::new(rx_b),
        },
        ChannelLink {
            tx: tx_b,
            rx: Mutex::new(rx_a),
        },
    )
}

impl FrameLink for ChannelLink {
    fn send(&self, frame: Frame) -> Result<(), TransportError> {
        self.tx.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv(&self) -> Result<Frame, TransportError> {
        self.rx.lock().recv().map_err(|_| TransportError::Closed)
    }
}

/// TCP link; writes are serialized, reads take the read half exclusively.
pub struct TcpLink {
    reader: Mutex<TcpStream>,
    writer: Mutex<TcpStream>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone()?;
        Ok(Self {
            reader: Mutex::new(reader),
            writer: Mutex::new(stream),
        })
    }
}

impl FrameLink for TcpLink {
    fn send(&self, frame: Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(&frame);
        let mut writer = self.writer.lock();
        writer.write_all(&bytes)?;
        Ok(())
    }

    fn recv(&self) -> Result<Frame, TransportError> {
        let mut reader = self.reader.lock();
        let mut header = [0u8; HEADER_LEN];
        reader
            .read_exact(&mut header)
            .map_err(|_| TransportError::Closed)?;
        let len = u32::from_le_bytes(header[14..18].try_into().unwrap());
        if len > MAX_BODY_LEN {
            return Err(TransportError::Frame(FrameError::BodyTooLarge(len)));
        }
        let mut buf = vec![0u8; HEADER_LEN + len as usize];
        buf[..HEADER_LEN].copy_from_slice(&header);
        reader
            .read_exact(&mut buf[HEADER_LEN..])
            .map_err(|_| TransportError::Closed)?;
        let (frame, _) = decode_frame(&buf).map_err(TransportError::Frame)?;
        Ok(frame)
    }
}
