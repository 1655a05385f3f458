//! Frame-level service for the storage-node engine: WRITE, READ, DRAIN,
//! and RECOVER requests.

use std::sync::Arc;

use sealstor_core::layout::{SectorMetadata64, METADATA64_LEN};
use sealstor_transport::{
    BodyReader, BodyWriter, Frame, FrameHandler, FrameType, RejectCode, SessionState,
};

use crate::remote::{RemoteEngine, RequestReject, WireSector};

pub struct RemoteService {
    engine: Arc<RemoteEngine>,
}

impl RemoteService {
    pub fn new(engine: Arc<RemoteEngine>) -> Self {
        Self { engine }
    }

    fn ack(request_id: u64, session_id: u64, payload: &[u8]) -> Frame {
        let mut body = BodyWriter::with_capacity(8 + payload.len());
        body.put_u64(request_id).put_raw(payload);
        Frame::new(FrameType::Ack, session_id, body.finish())
    }

    fn reject(request_id: u64, session_id: u64, code: RejectCode, sector: u64, msg: &str) -> Frame {
        let mut body = BodyWriter::new();
        body.put_u64(request_id)
            .put_u8(code as u8)
            .put_u64(sector)
            .put_bytes(msg.as_bytes());
        Frame::new(FrameType::Reject, session_id, body.finish())
    }

    fn reject_from(request_id: u64, session_id: u64, err: &RequestReject) -> Frame {
        Self::reject(request_id, session_id, err.code(), err.sector(), &err.to_string())
    }

    fn handle_inner(&self, session: &SessionState, frame: Frame) -> Frame {
        let session_id = session.session_id;
        let mut reader = BodyReader::new(&frame.body);
        let Ok(request_id) = reader.u64() else {
            return Self::reject(0, session_id, RejectCode::Protocol, u64::MAX, "missing request id");
        };
        let malformed =
            || Self::reject(request_id, session_id, RejectCode::Protocol, u64::MAX, "malformed body");
        let geom = self.engine.geometry();
        match frame.frame_type {
            FrameType::Write => {
                let Ok(device) = reader.bytes() else { return malformed() };
                if device != self.engine.device_id().as_bytes() {
                    return Self::reject(
                        request_id,
                        session_id,
                        RejectCode::Protocol,
                        u64::MAX,
                        "unknown device",
                    );
                }
                let (Ok(start), Ok(count)) = (reader.u64(), reader.u32()) else {
                    return malformed();
                };
                let sector_len = geom.sector_bytes() as usize;
                let mut sectors = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let Ok(data) = reader.fixed(sector_len) else { return malformed() };
                    let Ok(meta_bytes) = reader.fixed(METADATA64_LEN) else {
                        return malformed();
                    };
                    let Ok(meta) = SectorMetadata64::decode(meta_bytes) else {
                        return malformed();
                    };
                    sectors.push(WireSector { data, meta });
                }
                if reader.expect_end().is_err() {
                    return malformed();
                }
                match self.engine.handle_write(session_id, start, &sectors) {
                    Ok(()) => Self::ack(request_id, session_id, &[]),
                    Err(e) => Self::reject_from(request_id, session_id, &e),
                }
            }
            FrameType::Read => {
                let Ok(device) = reader.bytes() else { return malformed() };
                if device != self.engine.device_id().as_bytes() {
                    return Self::reject(
                        request_id,
                        session_id,
                        RejectCode::Protocol,
                        u64::MAX,
                        "unknown device",
                    );
                }
                let (Ok(start), Ok(count)) = (reader.u64(), reader.u32()) else {
                    return malformed();
                };
                let record_len = geom.record_bytes() as usize;
                let mut body = vec![0u8; 12 + record_len * count as usize];
                body[0..8].copy_from_slice(&request_id.to_le_bytes());
                body[8..12].copy_from_slice(&count.to_le_bytes());
                match self
                    .engine
                    .handle_read(session_id, start, count, &mut body[12..])
                {
                    Ok(()) => Frame::new(FrameType::ReadResp, session_id, body),
                    Err(e) => Self::reject_from(request_id, session_id, &e),
                }
            }
            FrameType::Drain => match self.engine.drain() {
                Ok(()) => Self::ack(request_id, session_id, &[]),
                Err(e) => Self::reject(
                    request_id,
                    session_id,
                    RejectCode::Device,
                    u64::MAX,
                    &e.to_string(),
                ),
            },
            FrameType::Recover => match self.engine.recover_check() {
                Ok(root) => Self::ack(request_id, session_id, &root),
                Err(e) => Self::reject(
                    request_id,
                    session_id,
                    RejectCode::Freshness,
                    u64::MAX,
                    &e.to_string(),
                ),
            },
            _ => Self::reject(
                request_id,
                session_id,
                RejectCode::Protocol,
                u64::MAX,
                "unexpected frame type",
            ),
        }
    }
}

impl FrameHandler for RemoteService {
    fn handle(&self, session: &SessionState, frame: Frame) -> Option<Frame> {
        self.engine.attach_session(session);
        Some(self.handle_inner(session, frame))
    }
}
