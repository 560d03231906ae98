//! Training across machines that keep their images to themselves.
//!
//! Workers hold images and latent variables; the master holds the model and
//! only ever receives sums over a worker's images.
//!
//! Frames are `u32 LE payload length | u8 type | payload`. Arrays inside
//! payloads carry a 16-byte header of four `u32 LE` extents followed by
//! `f64 LE` values. Exact sums travel as `[len, 3, 1, 1]` arrays of 43-bit
//! chunks.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataKind, ImageDataset};
use crate::error::{Error, Result};
use crate::exact::ExactVec;
use crate::grid::Grid;
use crate::hyper::HyperParams;
use crate::model::ModelState;
use crate::trainer::shard::{Aggregate, LocalShard, Request, Shard};
use crate::trainer::{run_em, TrainOptions, TrainReport};

pub const HELLO: u8 = 0x01;
pub const MODEL_BROADCAST: u8 = 0x02;
pub const DERIV_REQUEST: u8 = 0x03;
pub const AGG_REPLY: u8 = 0x04;
pub const LATENT_UPDATE_REQ: u8 = 0x05;
pub const LATENT_STATS_REPLY: u8 = 0x06;
pub const APPLY_TRANSFORM: u8 = 0x07;
pub const ERROR: u8 = 0x7F;
pub const SHUTDOWN: u8 = 0xFF;

/// Largest payload accepted, in bytes.
pub const MAX_FRAME: usize = 1 << 30;

pub fn known_type(t: u8) -> bool {
    matches!(
        t,
        HELLO | MODEL_BROADCAST | DERIV_REQUEST | AGG_REPLY | LATENT_UPDATE_REQ | LATENT_STATS_REPLY | APPLY_TRANSFORM
            | ERROR | SHUTDOWN
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.msg_type);
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        let k = r.read(&mut head[got..])?;
        if k == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Protocol("stream ended inside a frame header".into()));
        }
        got += k;
    }
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
    let msg_type = head[4];
    if !known_type(msg_type) {
        return Err(Error::Protocol(format!("unknown message type 0x{msg_type:02x}")));
    }
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Protocol(format!("stream ended inside a {len}-byte payload")))?;
    Ok(Some(Frame { msg_type, payload }))
}

/// An `f64` array with up to four extents.
#[derive(Debug, Clone, PartialEq)]
pub struct WireArray {
    pub dims: [u32; 4],
    pub data: Vec<f64>,
}

impl WireArray {
    pub fn new(dims: [u32; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::Protocol(format!("array extents {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let data = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        Self {
            dims: [r as u32, c as u32, 1, 1],
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.dims[2] != 1 || self.dims[3] != 1 {
            return Err(Error::Protocol("expected a matrix".into()));
        }
        Ok(DMatrix::from_row_slice(self.dims[0] as usize, self.dims[1] as usize, &self.data))
    }

    pub fn exact(v: &ExactVec) -> Self {
        Self {
            dims: [v.len() as u32, 3, 1, 1],
            data: v.to_triples(),
        }
    }

    pub fn to_exact(&self) -> Result<ExactVec> {
        if self.dims[1] != 3 || self.dims[2] != 1 || self.dims[3] != 1 {
            return Err(Error::Protocol("expected an exact-sum array".into()));
        }
        ExactVec::from_triples(&self.data).ok_or_else(|| Error::Protocol("malformed exact-sum chunks".into()))
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Decodes one array from the front of `bytes`, returning the rest.
    pub fn decode(bytes: &[u8]) -> Result<(Self, &[u8])> {
        if bytes.len() < 16 {
            return Err(Error::Protocol("truncated array header".into()));
        }
        let mut dims = [0u32; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.filter(|&n| n <= (bytes.len() - 16) / 8).ok_or_else(|| {
            Error::Protocol(format!("array extents {dims:?} exceed the payload"))
        })?;
        let data = bytes[16..16 + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((Self { dims, data }, &bytes[16 + 8 * n..]))
    }
}

pub fn encode_arrays(arrays: &[WireArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        a.encode_into(&mut out);
    }
    out
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<WireArray>> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("missing array count".into()));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let mut rest = &bytes[4..];
    let mut out = Vec::new();
    for _ in 0..count {
        let (a, r) = WireArray::decode(rest)?;
        out.push(a);
        rest = r;
    }
    if !rest.is_empty() {
        return Err(Error::Protocol(format!("{} trailing bytes after arrays", rest.len())));
    }
    Ok(out)
}

/// What a worker says about its data. Carries no image count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub kind: DataKind,
}

const KIND_MEAN: u8 = 0;
const KIND_SHAPE: u8 = 1;
const KIND_APPEARANCE: u8 = 2;
const KIND_OBJECTIVE: u8 = 3;
const KIND_SIGMA2: u8 = 4;
const KIND_GRAM: u8 = 5;
const KIND_INIT: u8 = 6;

/// Encodes a request as a frame.
pub fn request_frame(req: &Request) -> Frame {
    let deriv = |kind: u8| Frame::new(DERIV_REQUEST, vec![kind]);
    match req {
        Request::Mean => deriv(KIND_MEAN),
        Request::Shape => deriv(KIND_SHAPE),
        Request::Appearance => deriv(KIND_APPEARANCE),
        Request::Objective => deriv(KIND_OBJECTIVE),
        Request::Sigma2 => deriv(KIND_SIGMA2),
        Request::Gram => deriv(KIND_GRAM),
        Request::InitLatents { k, seed } => {
            let mut p = vec![KIND_INIT];
            p.extend_from_slice(&(*k as u32).to_le_bytes());
            p.extend_from_slice(&seed.to_le_bytes());
            Frame::new(DERIV_REQUEST, p)
        }
        Request::UpdateLatents { p } => Frame::new(LATENT_UPDATE_REQ, encode_arrays(&[WireArray::matrix(p)])),
        Request::ApplyTransform { t } => Frame::new(APPLY_TRANSFORM, encode_arrays(&[WireArray::matrix(t)])),
    }
}

/// Decodes a request frame.
pub fn parse_request(frame: &Frame) -> Result<Request> {
    let one_matrix = |p: &[u8]| -> Result<DMatrix<f64>> {
        let arrays = decode_arrays(p)?;
        match arrays.as_slice() {
            [a] => a.to_matrix(),
            _ => Err(Error::Protocol("expected exactly one array".into())),
        }
    };
    match frame.msg_type {
        DERIV_REQUEST => {
            let p = &frame.payload;
            match (p.first(), p.len()) {
                (Some(&KIND_MEAN), 1) => Ok(Request::Mean),
                (Some(&KIND_SHAPE), 1) => Ok(Request::Shape),
                (Some(&KIND_APPEARANCE), 1) => Ok(Request::Appearance),
                (Some(&KIND_OBJECTIVE), 1) => Ok(Request::Objective),
                (Some(&KIND_SIGMA2), 1) => Ok(Request::Sigma2),
                (Some(&KIND_GRAM), 1) => Ok(Request::Gram),
                (Some(&KIND_INIT), 13) => Ok(Request::InitLatents {
                    k: u32::from_le_bytes(p[1..5].try_into().expect("4 bytes")) as usize,
                    seed: u64::from_le_bytes(p[5..13].try_into().expect("8 bytes")),
                }),
                _ => Err(Error::Protocol(format!(
                    "malformed derivative request of {} bytes",
                    p.len()
                ))),
            }
        }
        LATENT_UPDATE_REQ => Ok(Request::UpdateLatents {
            p: one_matrix(&frame.payload)?,
        }),
        APPLY_TRANSFORM => Ok(Request::ApplyTransform {
            t: one_matrix(&frame.payload)?,
        }),
        t => Err(Error::Protocol(format!("0x{t:02x} is not a request"))),
    }
}

fn reply_frame(req: &Request, agg: &Aggregate) -> Frame {
    let arrays: Vec<WireArray> = agg.iter().map(WireArray::exact).collect();
    let t = if matches!(req, Request::UpdateLatents { .. }) {
        LATENT_STATS_REPLY
    } else {
        AGG_REPLY
    };
    Frame::new(t, encode_arrays(&arrays))
}

fn error_frame(e: &Error) -> Frame {
    Frame::new(ERROR, e.to_string().into_bytes())
}

fn ack() -> Frame {
    Frame::new(AGG_REPLY, encode_arrays(&[]))
}

enum Session {
    Closed,
    Shutdown,
}

fn serve_connection(shard: &mut LocalShard, stream: TcpStream) -> Result<Session> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(Session::Closed),
            Err(e) => {
                log::warn!("closing connection: {e}");
                let _ = write_frame(&mut writer, &error_frame(&e));
                return Ok(Session::Closed);
            }
        };
        let reply = match frame.msg_type {
            SHUTDOWN => return Ok(Session::Shutdown),
            HELLO => {
                let ds = shard.dataset();
                let hello = Hello {
                    dims: ds.grid().dims().to_vec(),
                    channels: ds.channels(),
                    kind: ds.kind(),
                };
                Ok(Frame::new(HELLO, serde_json::to_vec(&hello)?))
            }
            MODEL_BROADCAST => ModelState::from_bytes(&frame.payload)
                .and_then(|m| shard.set_model(&m))
                .map(|_| ack()),
            DERIV_REQUEST | LATENT_UPDATE_REQ | APPLY_TRANSFORM => {
                parse_request(&frame).and_then(|req| shard.handle(&req).map(|agg| reply_frame(&req, &agg)))
            }
            t => Err(Error::Protocol(format!("0x{t:02x} is not a request"))),
        };
        match reply {
            Ok(f) => write_frame(&mut writer, &f)?,
            Err(e @ Error::Protocol(_)) => {
                log::warn!("closing connection: {e}");
                write_frame(&mut writer, &error_frame(&e))?;
                return Ok(Session::Closed);
            }
            Err(e) => write_frame(&mut writer, &error_frame(&e))?,
        }
    }
}

/// Serves one shard on `listener` until a master sends `SHUTDOWN`.
///
/// Connections are handled one at a time; a malformed frame gets an error
/// reply and ends that connection, not the worker.
pub fn serve_worker(data: ImageDataset, listener: TcpListener) -> Result<()> {
    let mut shard = LocalShard::new(data);
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        match serve_connection(&mut shard, stream) {
            Ok(Session::Shutdown) => return Ok(()),
            Ok(Session::Closed) => continue,
            Err(e) => log::warn!("connection failed: {e}"),
        }
    }
    Ok(())
}

/// Direction and shape of one frame on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireRecord {
    pub to_worker: bool,
    pub msg_type: u8,
    pub payload_len: usize,
}

pub type WireLog = Arc<Mutex<Vec<WireRecord>>>;

/// A worker reached over TCP.
pub struct RemoteShard {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    endpoint: String,
    log: Option<WireLog>,
    expect: Option<u8>,
}

impl RemoteShard {
    pub fn connect(endpoint: &str) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Worker(format!("{endpoint}: {e}")))?
            .next()
            .ok_or_else(|| Error::Worker(format!("{endpoint}: no address")))?;
        let stream = TcpStream::connect(addr).map_err(|e| Error::Worker(format!("{endpoint}: {e}")))?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            endpoint: endpoint.to_string(),
            log: None,
            expect: None,
        })
    }

    /// Records every frame sent or received into `log`.
    pub fn with_log(mut self, log: WireLog) -> Self {
        self.log = Some(log);
        self
    }

    fn record(&self, to_worker: bool, f: &Frame) {
        if let Some(l) = &self.log {
            l.lock().expect("wire log").push(WireRecord {
                to_worker,
                msg_type: f.msg_type,
                payload_len: f.payload.len(),
            });
        }
    }

    fn send(&mut self, f: &Frame) -> Result<()> {
        self.record(true, f);
        write_frame(&mut self.writer, f).map_err(|e| Error::Worker(format!("{}: {e}", self.endpoint)))
    }

    fn receive(&mut self, expected: u8) -> Result<Frame> {
        let f = read_frame(&mut self.reader)
            .map_err(|e| Error::Worker(format!("{}: {e}", self.endpoint)))?
            .ok_or_else(|| Error::Worker(format!("{}: connection closed", self.endpoint)))?;
        self.record(false, &f);
        if f.msg_type == ERROR {
            return Err(Error::Worker(format!(
                "{}: {}",
                self.endpoint,
                String::from_utf8_lossy(&f.payload)
            )));
        }
        if f.msg_type != expected {
            return Err(Error::Protocol(format!(
                "{}: expected reply 0x{expected:02x}, got 0x{:02x}",
                self.endpoint, f.msg_type
            )));
        }
        Ok(f)
    }

    pub fn hello(&mut self) -> Result<Hello> {
        self.send(&Frame::new(HELLO, Vec::new()))?;
        let f = self.receive(HELLO)?;
        Ok(serde_json::from_slice(&f.payload)?)
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.send(&Frame::new(SHUTDOWN, Vec::new()))
    }
}

impl Shard for RemoteShard {
    fn set_model(&mut self, model: &ModelState) -> Result<()> {
        self.send(&Frame::new(MODEL_BROADCAST, model.to_bytes()))?;
        let f = self.receive(AGG_REPLY)?;
        if !decode_arrays(&f.payload)?.is_empty() {
            return Err(Error::Protocol("unexpected payload in acknowledgement".into()));
        }
        Ok(())
    }

    fn submit(&mut self, req: &Request) -> Result<()> {
        if self.expect.is_some() {
            return Err(Error::Protocol("a request is already pending".into()));
        }
        let f = request_frame(req);
        self.expect = Some(if f.msg_type == LATENT_UPDATE_REQ {
            LATENT_STATS_REPLY
        } else {
            AGG_REPLY
        });
        self.send(&f)
    }

    fn collect(&mut self) -> Result<Aggregate> {
        let expected = self
            .expect
            .take()
            .ok_or_else(|| Error::Protocol("no request pending".into()))?;
        let f = self.receive(expected)?;
        decode_arrays(&f.payload)?.iter().map(WireArray::to_exact).collect()
    }
}

/// Trains against remote workers and shuts them down afterwards.
pub fn master_train(
    endpoints: &[String],
    hyper: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(ModelState, TrainReport)> {
    master_train_logged(endpoints, hyper, seed, opts, None)
}

pub fn master_train_logged(
    endpoints: &[String],
    hyper: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    log: Option<WireLog>,
) -> Result<(ModelState, TrainReport)> {
    if endpoints.is_empty() {
        return Err(Error::Worker("no workers given".into()));
    }
    let mut shards = Vec::with_capacity(endpoints.len());
    for e in endpoints {
        let mut s = RemoteShard::connect(e)?;
        if let Some(l) = &log {
            s = s.with_log(l.clone());
        }
        shards.push(s);
    }
    let hellos: Vec<Hello> = shards.iter_mut().map(|s| s.hello()).collect::<Result<_>>()?;
    let first = &hellos[0];
    if hellos.iter().any(|h| h != first) {
        return Err(Error::Worker("workers hold data of different shapes or kinds".into()));
    }
    if first.kind.noise_kind() != Some(hyper.noise) {
        return Err(Error::Dataset(format!(
            "workers hold {:?} data, which does not match {} noise",
            first.kind,
            hyper.noise.name()
        )));
    }
    let grid = Grid::new(&first.dims)?;
    let out = run_em(&mut shards, grid, first.channels, hyper, seed, opts)?;
    for s in shards {
        s.shutdown()?;
    }
    Ok((out.model, out.report))
}
