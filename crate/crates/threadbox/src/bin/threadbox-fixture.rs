//! Helper program for live integration tests. Run it under
//! `threadbox run`; each scenario prints what it did and exits.

use std::ffi::CString;
use std::io::Write;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use threadbox::live::client::{gettid, sandboxed, Ack, Client};

fn say(msg: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{msg}");
    let _ = out.flush();
}

fn nnp_of_self() -> Result<String> {
    let status = std::fs::read_to_string("/proc/thread-self/status")?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("NoNewPrivs:"))
        .map(|v| v.trim().to_owned())
        .context("no NoNewPrivs line")
}

fn exec_shell(script: &str) -> Result<()> {
    let sh = CString::new("/bin/sh")?;
    let args = [sh.clone(), CString::new("-c")?, CString::new(script)?];
    nix::unistd::execv(&sh, &args)?;
    unreachable!()
}

fn inet_socket() -> std::io::Result<i32> {
    // SAFETY: plain syscall.
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_STREAM, 0) };
    if fd < 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(fd)
}

fn connect_v4(fd: i32, port: u16) -> std::io::Result<()> {
    let addr = libc::sockaddr_in {
        sin_family: libc::AF_INET as libc::sa_family_t,
        sin_port: port.to_be(),
        sin_addr: libc::in_addr {
            s_addr: u32::from_be_bytes([127, 0, 0, 1]).to_be(),
        },
        sin_zero: [0; 8],
    };
    // SAFETY: addr outlives the call and the length matches.
    let rc = unsafe {
        libc::connect(
            fd,
            (&addr as *const libc::sockaddr_in).cast(),
            std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
        )
    };
    if rc < 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn run(args: &[String]) -> Result<u8> {
    let scenario = args.first().map(String::as_str).unwrap_or("");
    let arg = |i: usize| {
        args.get(i)
            .cloned()
            .with_context(|| format!("{scenario}: missing argument {i}"))
    };

    if scenario == "exit-code" {
        return Ok(arg(1)?.parse()?);
    }

    let client = Client::from_env()?;
    client.sandbox_ps()?;
    match scenario {
        // reads a file under {rpath} and reports the thread's NNP flag
        "read-ok" => {
            let path = arg(1)?;
            let (len, nnp) = sandboxed(
                &client,
                "rpath",
                "reader",
                false,
                || -> Result<(usize, String)> { Ok((std::fs::read(&path)?.len(), nnp_of_self()?)) },
            )??;
            say(&format!("read {len} bytes"));
            say(&format!("no_new_privs={nnp}"));
        }
        // execs a shell that would create the sentinel, from an {rpath} thread
        "exec-violation" => {
            let sentinel = arg(1)?;
            sandboxed(&client, "rpath", "register", false, || {
                exec_shell(&format!("echo ran > '{sentinel}'"))
            })??;
            say("exec returned");
        }
        // an unsandboxed sibling thread execs while another thread is sandboxed
        "sibling-exec" => {
            let sentinel = arg(1)?;
            let (tx, rx) = std::sync::mpsc::channel();
            std::thread::spawn(move || {
                client.permissions("rpath", "idle", false).expect("declare");
                tx.send(()).expect("signal main");
                loop {
                    std::thread::park();
                }
            });
            rx.recv()?;
            exec_shell(&format!("echo ran > '{sentinel}'"))?;
        }
        // a {threading} thread spawns a thread that then uses rpath and net
        "clone-unsandboxed" => {
            let out = sandboxed(&client, "threading", "spawner", false, || {
                std::thread::spawn(|| -> std::io::Result<usize> {
                    let n = std::fs::read("/proc/self/status")?.len();
                    let fd = inet_socket()?;
                    // SAFETY: fd was just opened here.
                    unsafe { libc::close(fd) };
                    Ok(n)
                })
                .join()
            })?;
            match out {
                Ok(Ok(n)) if n > 0 => say("child thread unrestricted"),
                other => bail!("child thread failed: {other:?}"),
            }
        }
        // a {proc} thread forks; the child process uses net
        "fork-unsandboxed" => {
            let status = sandboxed(&client, "proc", "forker", false, || -> Result<i32> {
                // SAFETY: the child only makes raw syscalls before _exit.
                match unsafe { nix::unistd::fork()? } {
                    nix::unistd::ForkResult::Child => {
                        let code = if inet_socket().is_ok() { 0 } else { 1 };
                        unsafe { libc::_exit(code) }
                    }
                    nix::unistd::ForkResult::Parent { child } => {
                        match nix::sys::wait::waitpid(child, None)? {
                            nix::sys::wait::WaitStatus::Exited(_, c) => Ok(c),
                            other => bail!("child ended with {other:?}"),
                        }
                    }
                }
            })??;
            say(&format!("child exit {status}"));
            if status != 0 {
                return Ok(1);
            }
        }
        // connects an inet socket created before the sandbox, from {rpath ipc}
        "connect-inet-violation" => {
            let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
            let port = listener.local_addr()?.port();
            let fd = inet_socket()?;
            sandboxed(&client, "rpath ipc", "parser", false, || {
                connect_v4(fd, port)
            })??;
            say("connected");
        }
        // a second declaration is ignored; the first one stays in force
        "redeclare" => {
            sandboxed(&client, "rpath", "twice", false, || -> Result<()> {
                let again = client.permissions("rpath net", "", false)?;
                say(if again == Ack::AlreadyDeclared {
                    "ignored"
                } else {
                    "redeclared"
                });
                inet_socket()?;
                say("socket opened");
                Ok(())
            })??;
        }
        // complain mode: violations are logged and the thread keeps running
        "learn" => {
            let path = arg(1)?;
            sandboxed(&client, "", "login", true, || -> Result<()> {
                std::fs::read(&path)?;
                inet_socket()?;
                Ok(())
            })??;
            say("learned");
        }
        "tid" => say(&format!("tid {}", gettid())),
        other => bail!("unknown scenario `{other}`"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("threadbox-fixture: {e:#}");
            ExitCode::from(1)
        }
    }
}
