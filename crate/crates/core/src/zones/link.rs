//! Transports between the trusted zone and the host zone.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::host::{HostEndpoint, SESSION_TOKEN_ENV};
use super::wire::{encode_frame, read_frame, FrameError, Message};

/// Lock-step message channel to a host zone.
pub trait HostLink: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;

    /// Host weight tensors, when the host lives in this address space.
    fn audit_tensors(&self) -> Option<Vec<(String, crate::numerics::Matrix<f64>)>> {
        None
    }
}

/// Both zones in one process; messages are handed over directly.
pub struct InProcessLink {
    endpoint: HostEndpoint,
    replies: VecDeque<Message>,
}

impl InProcessLink {
    pub fn new(session_token: Vec<u8>) -> Self {
        InProcessLink {
            endpoint: HostEndpoint::new(session_token),
            replies: VecDeque::new(),
        }
    }
}

impl HostLink for InProcessLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        if self.endpoint.is_closed() {
            return Err(Error::Transport {
                retries: 0,
                source: io::Error::new(io::ErrorKind::BrokenPipe, "host zone closed"),
            });
        }
        if let Some(r) = self.endpoint.handle(msg.clone()) {
            self.replies.push_back(r);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        self.replies
            .pop_front()
            .ok_or_else(|| Error::Protocol("host zone sent no reply".into()))
    }

    fn audit_tensors(&self) -> Option<Vec<(String, crate::numerics::Matrix<f64>)>> {
        Some(self.endpoint.audit_tensors())
    }
}

/// How to launch a host-zone process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportConfig {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Attempts to repeat an interrupted write before giving up.
    pub max_retries: u32,
}

impl TransportConfig {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        TransportConfig {
            program: program.into(),
            args: Vec::new(),
            max_retries: 3,
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }
}

/// Host zone in a child process, speaking the framed protocol on its
/// stdin/stdout.
pub struct ProcessLink {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    max_retries: u32,
}

impl ProcessLink {
    pub fn spawn(config: &TransportConfig, session_token: &[u8]) -> Result<Self> {
        let mut child = Command::new(&config.program)
            .args(&config.args)
            .env(SESSION_TOKEN_ENV, hex::encode(session_token))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| Error::Transport { retries: 0, source })?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessLink {
            child,
            stdin,
            stdout,
            max_retries: config.max_retries,
        })
    }

    fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Transport {
            retries: 0,
            source: io::Error::new(io::ErrorKind::BrokenPipe, "host stdin closed"),
        })?;
        let mut retries = 0;
        loop {
            match stdin.write_all(bytes).and_then(|_| stdin.flush()) {
                Ok(()) => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted && retries < self.max_retries => {
                    retries += 1;
                }
                Err(source) => return Err(Error::Transport { retries, source }),
            }
        }
    }

    /// Writes arbitrary bytes to the host, bypassing framing.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.write_bytes(bytes)
    }

    /// Closes the host's stdin, signalling end of stream.
    pub fn close_input(&mut self) {
        if let Some(mut w) = self.stdin.take() {
            let _ = w.flush();
        }
    }

    /// Waits for the host to exit, killing it after `timeout`.
    pub fn wait_timeout(&mut self, timeout: Duration) -> Result<Option<ExitStatus>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait()? {
                return Ok(Some(status));
            }
            if Instant::now() >= deadline {
                let _ = self.child.kill();
                let _ = self.child.wait();
                return Ok(None);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl HostLink for ProcessLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.write_bytes(&encode_frame(msg))
    }

    fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.stdout).map_err(|e| match e {
            FrameError::Io(source) => Error::Transport { retries: 0, source },
            FrameError::Closed => Error::Transport {
                retries: 0,
                source: io::Error::new(io::ErrorKind::UnexpectedEof, "host zone closed the stream"),
            },
            other => Error::Protocol(other.to_string()),
        })
    }
}

impl Drop for ProcessLink {
    fn drop(&mut self) {
        self.close_input();
        if matches!(self.child.try_wait(), Ok(None)) {
            // give a well-behaved host a moment to exit after end of stream
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if !matches!(self.child.try_wait(), Ok(None)) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
