//! Environments running in a child process.
//!
//! The child speaks newline-delimited JSON on stdin/stdout. Its first line is
//! a handshake, `{"actions": A, "shape": [C, H, W]}`. The parent then sends
//! `{"cmd":"reset","seed":S}` or `{"cmd":"step","action":A}`, and each is
//! answered with
//! `{"obs": "<base64 of C·H·W bytes>", "shape": [C, H, W], "reward": r, "done": d}`.
//! Malformed replies, a silent child past the timeout and a child that exits
//! are environment errors that include whatever the child wrote to stderr.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use p4o_core::envs::preprocess::{luma_601, resize_area};
use p4o_core::envs::{Env, EnvStep, Observation};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub actions: usize,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Request {
    Reset { seed: u64 },
    Step { action: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub obs: String,
    pub shape: [usize; 3],
    pub reward: f64,
    pub done: bool,
}

impl Reply {
    pub fn new(pixels: &[u8], shape: [usize; 3], reward: f64, done: bool) -> Self {
        Self { obs: STANDARD.encode(pixels), shape, reward, done }
    }
}

/// Side length of preprocessed frames.
pub const PREPROCESSED_SIDE: usize = 84;

pub struct ExternalEnv {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    stderr: Arc<Mutex<String>>,
    timeout: Duration,
    handshake: Handshake,
    preprocess: bool,
    steps: usize,
}

fn env_error(step: usize, message: String) -> p4o_core::Error {
    p4o_core::Error::Env { env: 0, step, message }
}

impl ExternalEnv {
    /// Starts `command` through the shell and reads its handshake. With
    /// `preprocess`, RGB frames are converted to 84×84 grayscale.
    pub fn spawn(command: &str, timeout: Duration, preprocess: bool) -> p4o_core::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| env_error(0, format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                sink.lock().unwrap().push_str(&String::from_utf8_lossy(&buf[..n]));
            }
        });
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        let mut env = Self {
            child,
            stdin,
            lines,
            stderr,
            timeout,
            handshake: Handshake { actions: 0, shape: [0; 3] },
            preprocess,
            steps: 0,
        };
        let first = env.receive()?;
        env.handshake = serde_json::from_str(&first).map_err(|e| env.fail(format!("bad handshake `{first}`: {e}")))?;
        if env.handshake.actions == 0 || env.handshake.shape.contains(&0) {
            return Err(env.fail(format!("degenerate handshake {:?}", env.handshake)));
        }
        if preprocess && env.handshake.shape[0] != 3 && env.handshake.shape[0] != 1 {
            return Err(env.fail(format!("cannot preprocess {} channels", env.handshake.shape[0])));
        }
        Ok(env)
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn fail(&self, message: String) -> p4o_core::Error {
        thread::sleep(Duration::from_millis(20));
        let captured = self.stderr.lock().unwrap().clone();
        let message = if captured.trim().is_empty() {
            message
        } else {
            format!("{message}; child stderr: {}", captured.trim())
        };
        env_error(self.steps, message)
    }

    fn receive(&mut self) -> p4o_core::Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(line) => Ok(line),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(format!("no reply within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait().map(|s| s.to_string()).unwrap_or_else(|e| e.to_string());
                Err(self.fail(format!("child exited ({status})")))
            }
        }
    }

    fn exchange(&mut self, request: &Request) -> p4o_core::Result<Reply> {
        let line = serde_json::to_string(request).expect("requests serialize");
        if writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush()).is_err() {
            return Err(self.fail("cannot write to child".into()));
        }
        let text = self.receive()?;
        let reply: Reply = serde_json::from_str(&text).map_err(|e| self.fail(format!("malformed reply `{text}`: {e}")))?;
        if reply.shape != self.handshake.shape {
            return Err(self.fail(format!("reply shape {:?} != handshake {:?}", reply.shape, self.handshake.shape)));
        }
        if !reply.reward.is_finite() {
            return Err(self.fail("non-finite reward".into()));
        }
        Ok(reply)
    }

    fn observation(&self, reply: &Reply) -> p4o_core::Result<Observation> {
        let pixels = STANDARD.decode(&reply.obs).map_err(|e| self.fail(format!("bad base64: {e}")))?;
        let obs = Observation::new(reply.shape, pixels).map_err(|_| self.fail("frame size does not match shape".into()))?;
        if !self.preprocess {
            return Ok(obs);
        }
        let [c, h, w] = obs.shape;
        let gray = if c == 3 { luma_601(&obs.pixels, h, w)? } else { obs.pixels };
        let side = PREPROCESSED_SIDE;
        Observation::new([1, side, side], resize_area(&gray, h, w, side, side)?)
    }
}

impl Env for ExternalEnv {
    fn action_count(&self) -> usize {
        self.handshake.actions
    }

    fn observation_shape(&self) -> [usize; 3] {
        if self.preprocess {
            [1, PREPROCESSED_SIDE, PREPROCESSED_SIDE]
        } else {
            self.handshake.shape
        }
    }

    fn reset(&mut self, seed: u64) -> p4o_core::Result<Observation> {
        self.steps = 0;
        let reply = self.exchange(&Request::Reset { seed })?;
        self.observation(&reply)
    }

    fn step(&mut self, action: usize) -> p4o_core::Result<EnvStep> {
        if action >= self.handshake.actions {
            return Err(env_error(self.steps, format!("action {action} outside 0..{}", self.handshake.actions)));
        }
        self.steps += 1;
        let reply = self.exchange(&Request::Step { action: action as u32 })?;
        Ok(EnvStep {
            observation: self.observation(&reply)?,
            reward: reply.reward,
            terminal: reply.done,
            info: BTreeMap::new(),
        })
    }
}

impl Drop for ExternalEnv {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Reference child for the protocol: serves seeded pseudo-random frames of
/// `shape`, pays reward 1 per step and ends episodes after `episode_len`
/// steps. With `constant`, every frame is the same.
pub fn serve_stub(
    actions: usize,
    shape: [usize; 3],
    episode_len: usize,
    constant: bool,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    writeln!(output, "{}", serde_json::to_string(&Handshake { actions, shape }).unwrap())?;
    output.flush()?;
    let (mut seed, mut t) = (0u64, 0usize);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("stub: cannot parse `{line}`: {e}");
                std::process::exit(1);
            }
        };
        let (reward, done) = match req {
            Request::Reset { seed: s } => {
                seed = s;
                t = 0;
                (0.0, false)
            }
            Request::Step { .. } => {
                t += 1;
                (1.0, episode_len > 0 && t % episode_len == 0)
            }
        };
        let frame = stub_frame(shape, if constant { 0 } else { seed }, if constant { 0 } else { t });
        writeln!(output, "{}", serde_json::to_string(&Reply::new(&frame, shape, reward, done)).unwrap())?;
        output.flush()?;
    }
    Ok(())
}

/// The frame [`serve_stub`] sends at step `t` of the episode reset with `seed`.
pub fn stub_frame(shape: [usize; 3], seed: u64, t: usize) -> Vec<u8> {
    let mut rng = p4o_core::Rng::with_stream(seed, t as u64);
    (0..shape.iter().product::<usize>()).map(|_| rng.next_u64() as u8).collect()
}
