//! Wire service and client for the broker: REGISTER_DEVICE, LEASE, RETURN,
//! and PROVISION_KEY requests over the shared framing.

use std::sync::Arc;

use sealstor_core::crypto::DeviceKey;
use sealstor_transport::{
    BodyReader, BodyWriter, Frame, FrameHandler, FrameType, RejectCode, RpcClient, SessionState,
    TransportError,
};
use thiserror::Error;

use crate::broker::{KbsError, KeyBroker};
use crate::ledger::{LeaseRange, LedgerError};

#[derive(Debug, Error)]
pub enum KbsClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("counter space exhausted: {0}")]
    Exhausted(String),
    #[error("request rejected ({code:?}): {message}")]
    Rejected { code: RejectCode, message: String },
    #[error("malformed response")]
    MalformedResponse,
}

/// Serves a [`KeyBroker`] to handshaken sessions.
pub struct KbsService {
    broker: Arc<KeyBroker>,
}

impl KbsService {
    pub fn new(broker: Arc<KeyBroker>) -> Self {
        Self { broker }
    }

    fn reject(request_id: u64, code: RejectCode, message: &str) -> Frame {
        let mut body = BodyWriter::new();
        body.put_u64(request_id)
            .put_u8(code as u8)
            .put_u64(u64::MAX)
            .put_bytes(message.as_bytes());
        Frame::new(FrameType::Reject, 0, body.finish())
    }

    fn reject_from(request_id: u64, err: &KbsError) -> Frame {
        let code = match err {
            KbsError::Ledger(LedgerError::Exhausted { .. }) => RejectCode::Exhausted,
            _ => RejectCode::Protocol,
        };
        Self::reject(request_id, code, &err.to_string())
    }

    fn handle_inner(&self, frame: &Frame) -> Result<Frame, Frame> {
        let mut reader = BodyReader::new(&frame.body);
        let request_id = reader
            .u64()
            .map_err(|_| Self::reject(0, RejectCode::Protocol, "missing request id"))?;
        let malformed = || Self::reject(request_id, RejectCode::Protocol, "malformed body");
        match frame.frame_type {
            FrameType::RegisterDevice => {
                let device = read_str(&mut reader).map_err(|_| malformed())?;
                self.broker
                    .register_device(&device)
                    .map_err(|e| Self::reject_from(request_id, &e))?;
                let mut body = BodyWriter::new();
                body.put_u64(request_id);
                Ok(Frame::new(FrameType::Ack, frame.session_id, body.finish()))
            }
            FrameType::Lease => {
                let device = read_str(&mut reader).map_err(|_| malformed())?;
                let lessee = read_str(&mut reader).map_err(|_| malformed())?;
                let units = reader.u64().map_err(|_| malformed())?;
                let granted = self
                    .broker
                    .lease_counters(&device, &lessee, units)
                    .map_err(|e| Self::reject_from(request_id, &e))?;
                let mut body = BodyWriter::with_capacity(12 + granted.len() * 16);
                body.put_u64(request_id).put_u32(granted.len() as u32);
                for range in &granted {
                    body.put_u64(range.start).put_u64(range.end);
                }
                Ok(Frame::new(FrameType::Ack, frame.session_id, body.finish()))
            }
            FrameType::Return => {
                let device = read_str(&mut reader).map_err(|_| malformed())?;
                let lessee = read_str(&mut reader).map_err(|_| malformed())?;
                let count = reader.u32().map_err(|_| malformed())?;
                let mut ranges = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let start = reader.u64().map_err(|_| malformed())?;
                    let end = reader.u64().map_err(|_| malformed())?;
                    ranges.push(LeaseRange { start, end });
                }
                self.broker
                    .return_counters(&device, &lessee, &ranges)
                    .map_err(|e| Self::reject_from(request_id, &e))?;
                let mut body = BodyWriter::new();
                body.put_u64(request_id);
                Ok(Frame::new(FrameType::Ack, frame.session_id, body.finish()))
            }
            FrameType::Key => {
                let tenant = read_str(&mut reader).map_err(|_| malformed())?;
                let device = read_str(&mut reader).map_err(|_| malformed())?;
                let key = self
                    .broker
                    .provision_device_key(&tenant, &device)
                    .map_err(|e| Self::reject_from(request_id, &e))?;
                let mut body = BodyWriter::new();
                body.put_u64(request_id).put_raw(key.as_bytes());
                Ok(Frame::new(FrameType::Ack, frame.session_id, body.finish()))
            }
            _ => Err(Self::reject(request_id, RejectCode::Protocol, "unexpected frame type")),
        }
    }
}

fn read_str(reader: &mut BodyReader<'_>) -> Result<String, ()> {
    let bytes = reader.bytes().map_err(|_| ())?;
    String::from_utf8(bytes.to_vec()).map_err(|_| ())
}

impl FrameHandler for KbsService {
    fn handle(&self, _session: &SessionState, frame: Frame) -> Option<Frame> {
        match self.handle_inner(&frame) {
            Ok(reply) => Some(reply),
            Err(reject) => Some(reject),
        }
    }
}

/// Typed client over an established session to the broker.
pub struct KbsClient {
    rpc: RpcClient,
}

impl KbsClient {
    pub fn new(rpc: RpcClient) -> Self {
        Self { rpc }
    }

    fn expect_ack(frame: Frame) -> Result<Vec<u8>, KbsClientError> {
        match frame.frame_type {
            FrameType::Ack => Ok(frame.body),
            FrameType::Reject => {
                let mut reader = BodyReader::new(&frame.body);
                let _request = reader.u64().map_err(|_| KbsClientError::MalformedResponse)?;
                let code = RejectCode::from_u8(
                    reader.u8().map_err(|_| KbsClientError::MalformedResponse)?,
                )
                .ok_or(KbsClientError::MalformedResponse)?;
                let _sector = reader.u64().map_err(|_| KbsClientError::MalformedResponse)?;
                let message = String::from_utf8_lossy(
                    reader.bytes().map_err(|_| KbsClientError::MalformedResponse)?,
                )
                .into_owned();
                if code == RejectCode::Exhausted {
                    Err(KbsClientError::Exhausted(message))
                } else {
                    Err(KbsClientError::Rejected { code, message })
                }
            }
            _ => Err(KbsClientError::MalformedResponse),
        }
    }

    pub fn register_device(&self, device: &str) -> Result<(), KbsClientError> {
        let reply = self.rpc.call(FrameType::RegisterDevice, |id| {
            let mut body = BodyWriter::new();
            body.put_u64(id).put_bytes(device.as_bytes());
            body.finish()
        })?;
        Self::expect_ack(reply).map(|_| ())
    }

    pub fn lease(
        &self,
        device: &str,
        lessee: &str,
        units: u64,
    ) -> Result<Vec<LeaseRange>, KbsClientError> {
        let reply = self.rpc.call(FrameType::Lease, |id| {
            let mut body = BodyWriter::new();
            body.put_u64(id)
                .put_bytes(device.as_bytes())
                .put_bytes(lessee.as_bytes())
                .put_u64(units);
            body.finish()
        })?;
        let body = Self::expect_ack(reply)?;
        let mut reader = BodyReader::new(&body);
        let _request = reader.u64().map_err(|_| KbsClientError::MalformedResponse)?;
        let count = reader.u32().map_err(|_| KbsClientError::MalformedResponse)?;
        let mut ranges = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let start = reader.u64().map_err(|_| KbsClientError::MalformedResponse)?;
            let end = reader.u64().map_err(|_| KbsClientError::MalformedResponse)?;
            ranges.push(LeaseRange { start, end });
        }
        Ok(ranges)
    }

    pub fn give_back(
        &self,
        device: &str,
        lessee: &str,
        ranges: &[LeaseRange],
    ) -> Result<(), KbsClientError> {
        let reply = self.rpc.call(FrameType::Return, |id| {
            let mut body = BodyWriter::new();
            body.put_u64(id)
                .put_bytes(device.as_bytes())
                .put_bytes(lessee.as_bytes())
                .put_u32(ranges.len() as u32);
            for range in ranges {
                body.put_u64(range.start).put_u64(range.end);
            }
            body.finish()
        })?;
        Self::expect_ack(reply).map(|_| ())
    }

    pub fn provision_key(
        &self,
        tenant: &str,
        device: &str,
    ) -> Result<DeviceKey, KbsClientError> {
        let reply = self.rpc.call(FrameType::Key, |id| {
            let mut body = BodyWriter::new();
            body.put_u64(id)
                .put_bytes(tenant.as_bytes())
                .put_bytes(device.as_bytes());
            body.finish()
        })?;
        let body = Self::expect_ack(reply)?;
        if body.len() != 8 + 32 {
            return Err(KbsClientError::MalformedResponse);
        }
        Ok(DeviceKey::from_bytes(body[8..40].try_into().unwrap()))
    }
}
