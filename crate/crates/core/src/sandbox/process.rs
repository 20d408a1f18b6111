//! One guest process per execution, killed when it overruns its budget.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{timeout_reply, ExecutionRequest, GuestReply, Sandbox, SandboxError, DEFAULT_GRACE};

const STDERR_LIMIT: usize = 4096;

#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    program: PathBuf,
    args: Vec<String>,
    grace: Duration,
}

impl ProcessSandbox {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            grace: DEFAULT_GRACE,
        }
    }

    /// Time between SIGTERM and SIGKILL.
    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    fn describe(&self) -> String {
        let mut s = self.program.display().to_string();
        for a in &self.args {
            s.push(' ');
            s.push_str(a);
        }
        s
    }
}

fn signal_group(pid: u32, signal: libc::c_int) {
    // The guest leads its own process group, so this also reaches children.
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

fn wait_for(child: &mut Child, limit: Duration) -> Option<std::process::ExitStatus> {
    let deadline = Instant::now() + limit;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Some(status),
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
            _ => return None,
        }
    }
}

/// SIGTERM, then SIGKILL once `grace` has passed.
fn terminate(child: &mut Child, grace: Duration) -> String {
    signal_group(child.id(), libc::SIGTERM);
    if let Some(status) = wait_for(child, grace) {
        signal_group(child.id(), libc::SIGKILL);
        return status.to_string();
    }
    signal_group(child.id(), libc::SIGKILL);
    let _ = child.kill();
    child
        .wait()
        .map(|s| s.to_string())
        .unwrap_or_else(|e| e.to_string())
}

impl Sandbox for ProcessSandbox {
    fn execute(&self, request: &ExecutionRequest) -> Result<GuestReply, SandboxError> {
        let budget = request.budget();
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|source| SandboxError::Spawn {
                command: self.describe(),
                source,
            })?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        // A guest that dies before reading shows up below as a missing reply.
        let _ = stdin.write_all(line.as_bytes());
        drop(stdin);

        let stdout = child.stdout.take().expect("piped stdout");
        let (reply_tx, reply_rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reply = String::new();
            let res = BufReader::new(stdout).read_line(&mut reply).map(|_| reply);
            let _ = reply_tx.send(res);
        });
        let stderr = child.stderr.take().expect("piped stderr");
        let (err_tx, err_rx) = mpsc::channel();
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.take(STDERR_LIMIT as u64).read_to_end(&mut buf);
            let _ = err_tx.send(String::from_utf8_lossy(&buf).into_owned());
        });

        match reply_rx.recv_timeout(budget) {
            Ok(Ok(reply)) if !reply.trim().is_empty() => {
                if wait_for(&mut child, self.grace).is_none() {
                    terminate(&mut child, Duration::ZERO);
                }
                serde_json::from_str(reply.trim()).map_err(|e| SandboxError::Malformed {
                    line: reply.trim().to_string(),
                    message: e.to_string(),
                })
            }
            Ok(Ok(_)) | Err(mpsc::RecvTimeoutError::Disconnected) => {
                let status = match wait_for(&mut child, self.grace) {
                    Some(status) => status.to_string(),
                    None => terminate(&mut child, Duration::ZERO),
                };
                signal_group(child.id(), libc::SIGKILL);
                let stderr = err_rx
                    .recv_timeout(Duration::from_secs(1))
                    .unwrap_or_default();
                Err(SandboxError::NoReply {
                    status,
                    stderr: stderr.trim().to_string(),
                })
            }
            Ok(Err(e)) => {
                terminate(&mut child, Duration::ZERO);
                Err(SandboxError::Io(e))
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let status = terminate(&mut child, self.grace);
                tracing::debug!(%status, "guest killed after exceeding its budget");
                Ok(timeout_reply(budget))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    fn sh(script: &str) -> ProcessSandbox {
        ProcessSandbox::new("/bin/sh", vec!["-c".into(), script.into()])
    }

    fn request(budget: f64) -> ExecutionRequest {
        ExecutionRequest {
            program: "x".into(),
            kind: TaskKind::Vqa,
            fixture_path: "/nonexistent".into(),
            time_budget_s: budget,
        }
    }

    #[test]
    fn reads_one_reply_line() {
        let sb = sh("read req; echo '{\"status\":\"ok\",\"result\":\"cat\"}'");
        let reply = sb.execute(&request(5.0)).unwrap();
        assert_eq!(
            reply,
            GuestReply::Ok {
                result: super::super::WireValue::Text("cat".into())
            }
        );
    }

    #[test]
    fn overrunning_guest_is_killed() {
        let sb = sh("read req; sleep 30").with_grace(Duration::from_millis(200));
        let start = Instant::now();
        match sb.execute(&request(0.3)).unwrap() {
            GuestReply::Error(e) => assert!(e.timed_out),
            other => panic!("unexpected {other:?}"),
        }
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn term_ignoring_guest_gets_killed_after_grace() {
        let sb = sh("trap '' TERM; read req; while true; do sleep 0.05; done")
            .with_grace(Duration::from_millis(300));
        let start = Instant::now();
        let reply = sb.execute(&request(0.2)).unwrap();
        let elapsed = start.elapsed();
        assert!(matches!(reply, GuestReply::Error(ref e) if e.timed_out));
        assert!(elapsed >= Duration::from_millis(450), "{elapsed:?}");
        assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    }

    #[test]
    fn silent_exit_and_garbage_are_errors() {
        let err = sh("read req; echo oops >&2; exit 3").execute(&request(5.0)).unwrap_err();
        match err {
            SandboxError::NoReply { stderr, .. } => assert_eq!(stderr, "oops"),
            other => panic!("unexpected {other:?}"),
        }
        let err = sh("read req; echo not-json").execute(&request(5.0)).unwrap_err();
        assert!(matches!(err, SandboxError::Malformed { .. }));
    }

    #[test]
    fn missing_binary_is_a_spawn_error() {
        let err = ProcessSandbox::new("/nonexistent/guest", vec![])
            .execute(&request(1.0))
            .unwrap_err();
        assert!(matches!(err, SandboxError::Spawn { .. }));
    }
}
