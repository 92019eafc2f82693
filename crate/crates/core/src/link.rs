//! Transports between the master and the controller.
//!
//! Both kinds run the controller in lockstep with the master: every control
//! period the master hands over the bytes due for delivery and receives the
//! controller's output for that tick. On stream transports the tick boundary
//! is an ACK frame sent by the master; its `acked_seq` is the tick index and
//! a nonzero status marks an overrunning tick. Barrier frames are consumed
//! by the server and never reach the controller.

use crate::control_sim::{Controller, ControllerConfig};
use crate::protocol::{encode_frame, Frame, Message, StreamDecoder};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::os::unix::net::UnixStream;
use std::thread::JoinHandle;

pub trait ControllerLink: Send {
    /// Delivers this tick's bytes in order, runs one controller period and
    /// returns the frames the controller emitted.
    fn exchange(&mut self, inbox: Vec<Vec<u8>>, overrun: bool) -> io::Result<Vec<Frame>>;
}

/// Controller in the same thread; frames still pass through the codec.
pub struct DirectLink {
    pub controller: Controller,
}

impl DirectLink {
    pub fn new(cfg: ControllerConfig) -> Self {
        Self {
            controller: Controller::new(cfg),
        }
    }
}

impl ControllerLink for DirectLink {
    fn exchange(&mut self, inbox: Vec<Vec<u8>>, overrun: bool) -> io::Result<Vec<Frame>> {
        let out = self.controller.tick_bytes(&inbox, overrun);
        let bytes = Controller::encode_output(&out);
        crate::protocol::decode_all(&bytes)
            .into_iter()
            .map(|r| r.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
            .collect()
    }
}

/// Master end of a byte-stream connection to a controller server.
pub struct StreamLink<S: Read + Write + Send> {
    stream: S,
    decoder: StreamDecoder,
    tick: u32,
    buf: Vec<u8>,
    /// Server thread for local links; it exits once this end closes.
    #[allow(dead_code)]
    server: Option<JoinHandle<io::Result<ServeStats>>>,
}

impl<S: Read + Write + Send> StreamLink<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            decoder: StreamDecoder::default(),
            tick: 0,
            buf: vec![0; 4096],
            server: None,
        }
    }
}

impl StreamLink<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self::new(s))
    }
}

impl StreamLink<UnixStream> {
    /// Controller on its own thread behind a socket pair.
    pub fn spawn_local(cfg: ControllerConfig) -> io::Result<Self> {
        let (a, b) = UnixStream::pair()?;
        let handle = std::thread::Builder::new()
            .name("controller".into())
            .spawn(move || serve_controller(b, Controller::new(cfg)))?;
        let mut link = Self::new(a);
        link.server = Some(handle);
        Ok(link)
    }
}

impl<S: Read + Write + Send> ControllerLink for StreamLink<S> {
    fn exchange(&mut self, inbox: Vec<Vec<u8>>, overrun: bool) -> io::Result<Vec<Frame>> {
        let mut out: Vec<u8> = inbox.concat();
        out.extend(encode_frame(&Frame::new(
            self.tick,
            0,
            Message::Ack {
                status: overrun as u8,
                acked_seq: self.tick,
            },
        )));
        self.tick = self.tick.wrapping_add(1);
        self.stream.write_all(&out)?;
        self.stream.flush()?;
        let mut frames = vec![];
        loop {
            while let Some(r) = self.decoder.next_frame() {
                let f = r.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                let done = matches!(f.msg, Message::Feedback(_));
                frames.push(f);
                if done {
                    return Ok(frames);
                }
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "controller closed the link"));
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub ticks: u64,
    pub malformed: u64,
}

/// Controller side of a stream link. Runs until the peer disconnects.
pub fn serve_controller<S: Read + Write>(mut stream: S, mut controller: Controller) -> io::Result<ServeStats> {
    let mut decoder = StreamDecoder::default();
    let mut buf = vec![0u8; 4096];
    let mut pending: Vec<Frame> = vec![];
    let mut stats = ServeStats::default();
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(stats),
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(stats),
            Err(e) => return Err(e),
        };
        decoder.push(&buf[..n]);
        while let Some(r) = decoder.next_frame() {
            match r {
                Ok(Frame {
                    msg: Message::Ack { status, .. },
                    ..
                }) => {
                    let out = controller.tick_frames(&pending, status != 0);
                    pending.clear();
                    stats.ticks += 1;
                    stream.write_all(&Controller::encode_output(&out))?;
                }
                Ok(f) => pending.push(f),
                Err(e) => {
                    log::debug!("controller server dropped malformed input: {e}");
                    controller.note_malformed();
                    stats.malformed += 1;
                }
            }
        }
        stream.flush()?;
    }
}

/// Accepts master connections one after another, each with a fresh
/// controller.
pub fn listen_controller(addr: impl ToSocketAddrs, cfg: ControllerConfig, sessions: Option<usize>) -> io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    log::info!("controller listening on {}", listener.local_addr()?);
    let mut served = 0;
    for conn in listener.incoming() {
        let conn = conn?;
        conn.set_nodelay(true)?;
        let peer = conn.peer_addr().ok();
        let stats = serve_controller(conn, Controller::new(cfg.clone()))?;
        log::info!("session from {peer:?} ended after {} ticks", stats.ticks);
        served += 1;
        if sessions.is_some_and(|n| served >= n) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::encode_frame;

    fn script(t: u32) -> Vec<Vec<u8>> {
        let mut v = vec![];
        if t % 10 == 0 {
            v.push(encode_frame(&Frame::new(2 * t + 1, t as u64 * 1_000_000, Message::Heartbeat)));
        }
        if t == 1 {
            v.push(encode_frame(&Frame::new(2 * t + 2, 1_000_000, Message::Enable)));
        }
        if t == 5 {
            v.push(encode_frame(&Frame::new(
                2 * t + 2,
                5_000_000,
                Message::Setpoint([0.01, 0.0, 0.0, 0.2, -0.1, 0.0, 0.0, 0.0]),
            )));
        }
        v
    }

    #[test]
    fn direct_and_socket_links_agree() {
        let mut direct = DirectLink::new(ControllerConfig::default());
        let mut pipe = StreamLink::spawn_local(ControllerConfig::default()).unwrap();
        for t in 0..300 {
            let a = direct.exchange(script(t), false).unwrap();
            let b = pipe.exchange(script(t), false).unwrap();
            assert_eq!(a, b, "tick {t}");
        }
    }

    #[test]
    fn tcp_link_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (conn, _) = listener.accept().unwrap();
            serve_controller(conn, Controller::new(ControllerConfig::default())).unwrap()
        });
        let mut link = StreamLink::connect(addr).unwrap();
        let mut direct = DirectLink::new(ControllerConfig::default());
        for t in 0..50 {
            assert_eq!(link.exchange(script(t), false).unwrap(), direct.exchange(script(t), false).unwrap());
        }
        drop(link);
        assert_eq!(server.join().unwrap().ticks, 50);
    }
}
