//! Turns raw syscall arguments into the context keys the mapping table
//! asks for.

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

use threadbox_core::{Condition, ContextKey, OpenAccess, SockDomain, SyscallEvent};

/// Syscall number and arguments at syscall entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawSyscall {
    pub nr: i64,
    pub args: [u64; 6],
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("no decoder for {key} on {syscall}")]
    Unsupported { syscall: String, key: ContextKey },
    #[error("inspecting {what}: {source}")]
    Inspect {
        what: &'static str,
        source: io::Error,
    },
}

/// Access to a stopped tracee.
pub trait TaskInspector {
    /// Address family of socket `fd` in process `tgid`.
    fn socket_domain(&self, tgid: u32, fd: i32) -> io::Result<i32>;
    /// Reads `buf.len()` bytes at `addr` in the address space of `tid`.
    fn read_memory(&self, tid: u32, addr: u64, buf: &mut [u8]) -> io::Result<()>;
}

/// Duplicates descriptors with `pidfd_getfd` and reads memory with
/// `process_vm_readv`. Both need ptrace-level access to the target.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcInspector;

impl TaskInspector for ProcInspector {
    fn socket_domain(&self, tgid: u32, fd: i32) -> io::Result<i32> {
        // SAFETY: plain syscalls; returned descriptors are owned below.
        let pidfd = unsafe { libc::syscall(libc::SYS_pidfd_open, tgid as libc::pid_t, 0) };
        if pidfd < 0 {
            return Err(io::Error::last_os_error());
        }
        let pidfd = unsafe { OwnedFd::from_raw_fd(pidfd as i32) };
        let local = unsafe { libc::syscall(libc::SYS_pidfd_getfd, pidfd.as_raw_fd(), fd, 0) };
        if local < 0 {
            return Err(io::Error::last_os_error());
        }
        let local = unsafe { OwnedFd::from_raw_fd(local as i32) };
        let mut domain: libc::c_int = 0;
        let mut len = std::mem::size_of::<libc::c_int>() as libc::socklen_t;
        let rc = unsafe {
            libc::getsockopt(
                local.as_raw_fd(),
                libc::SOL_SOCKET,
                libc::SO_DOMAIN,
                (&mut domain as *mut libc::c_int).cast(),
                &mut len,
            )
        };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(domain)
    }

    fn read_memory(&self, tid: u32, addr: u64, buf: &mut [u8]) -> io::Result<()> {
        use nix::sys::uio::{process_vm_readv, RemoteIoVec};
        use nix::unistd::Pid;
        let want = buf.len();
        let remote = [RemoteIoVec {
            base: addr as usize,
            len: want,
        }];
        let mut local = [io::IoSliceMut::new(buf)];
        let n = process_vm_readv(Pid::from_raw(tid as i32), &mut local, &remote)
            .map_err(io::Error::from)?;
        if n != want {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "short read from tracee",
            ));
        }
        Ok(())
    }
}

pub fn domain_of(family: i32) -> SockDomain {
    match family {
        libc::AF_INET | libc::AF_INET6 => SockDomain::Inet,
        libc::AF_UNIX => SockDomain::Unix,
        _ => SockDomain::Other,
    }
}

/// Open flags to access class. A read-only open that creates or truncates
/// also writes.
pub fn access_of(flags: u64) -> OpenAccess {
    let flags = flags as i32;
    match flags & libc::O_ACCMODE {
        libc::O_RDONLY if flags & (libc::O_CREAT | libc::O_TRUNC) != 0 => OpenAccess::ReadWrite,
        libc::O_RDONLY => OpenAccess::Read,
        libc::O_WRONLY => OpenAccess::Write,
        _ => OpenAccess::ReadWrite,
    }
}

fn read_u64(
    insp: &dyn TaskInspector,
    tid: u32,
    addr: u64,
    what: &'static str,
) -> Result<u64, DecodeError> {
    let mut b = [0u8; 8];
    insp.read_memory(tid, addr, &mut b)
        .map_err(|source| DecodeError::Inspect { what, source })?;
    Ok(u64::from_ne_bytes(b))
}

/// Builds the event for `syscall`, filling in `key` when the mapping needs
/// it.
pub fn decode(
    tid: u32,
    tgid: u32,
    syscall: &str,
    raw: &RawSyscall,
    key: Option<ContextKey>,
    insp: &dyn TaskInspector,
) -> Result<SyscallEvent, DecodeError> {
    let ev = SyscallEvent::new(tid, tgid, syscall);
    let Some(key) = key else {
        return Ok(ev);
    };
    let unsupported = || DecodeError::Unsupported {
        syscall: syscall.to_owned(),
        key,
    };
    let a = raw.args;
    let cond = match key {
        ContextKey::SockDomain => {
            let family = match syscall {
                "socket" | "socketpair" => a[0] as i32,
                "bind" | "connect" | "listen" | "accept" | "accept4" | "sendto" | "recvfrom"
                | "sendmsg" | "recvmsg" | "sendmmsg" | "recvmmsg" | "shutdown" | "getsockname"
                | "getpeername" | "setsockopt" | "getsockopt" => insp
                    .socket_domain(tgid, a[0] as i32)
                    .map_err(|source| DecodeError::Inspect {
                        what: "socket",
                        source,
                    })?,
                _ => return Err(unsupported()),
            };
            Condition::SockDomain(domain_of(family))
        }
        ContextKey::CloneIsThread => {
            let flags = match syscall {
                "clone" => a[0],
                "clone3" => read_u64(insp, tid, a[0], "clone_args")?,
                "fork" | "vfork" => 0,
                _ => return Err(unsupported()),
            };
            Condition::CloneIsThread(flags & libc::CLONE_THREAD as u64 != 0)
        }
        ContextKey::OpenAccess => {
            let flags = match syscall {
                "open" => a[1],
                "openat" => a[2],
                "openat2" => read_u64(insp, tid, a[2], "open_how")?,
                "creat" => (libc::O_WRONLY | libc::O_CREAT | libc::O_TRUNC) as u64,
                _ => return Err(unsupported()),
            };
            Condition::OpenAccess(access_of(flags))
        }
    };
    Ok(ev.with(cond))
}
