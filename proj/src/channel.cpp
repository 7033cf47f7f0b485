#include <cerrno>
#include <csignal>
#include <cstring>
#include <string>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "regprompt/segmenter.hpp"

namespace regprompt {

namespace {

using Clock = std::chrono::steady_clock;

/// Buffered line reader over a file descriptor with poll()-based timeouts.
class FdLineReader {
public:
    explicit FdLineReader(int fd) : fd_(fd) {}

    std::string read_line(std::chrono::milliseconds timeout, const std::string& who) {
        const auto deadline = Clock::now() + timeout;
        for (;;) {
            if (const auto pos = buffer_.find('\n'); pos != std::string::npos) {
                std::string line = buffer_.substr(0, pos);
                buffer_.erase(0, pos + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
            if (left.count() <= 0) throw BackendError(BackendError::Kind::timeout, who + ": response timed out");
            pollfd p{fd_, POLLIN, 0};
            const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw BackendError(BackendError::Kind::unreachable, who + ": poll failed: " + std::strerror(errno));
            }
            if (rc == 0) throw BackendError(BackendError::Kind::timeout, who + ": response timed out");
            char chunk[65536];
            const ssize_t n = ::read(fd_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                throw BackendError(BackendError::Kind::unreachable, who + ": read failed: " + std::strerror(errno));
            }
            if (n == 0) throw BackendError(BackendError::Kind::unreachable, who + ": backend closed the connection");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    int fd_;
    std::string buffer_;
};

void write_all(int fd, const std::string& data, const std::string& who, bool socket) {
    std::size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = socket ? ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                                 : ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendError(BackendError::Kind::unreachable, who + ": write failed: " + std::strerror(errno));
        }
        off += static_cast<std::size_t>(n);
    }
}

class ProcessChannel final : public LineChannel {
public:
    explicit ProcessChannel(const std::string& command) : command_(command), reader_(-1) {
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (::pipe(to_child) != 0) throw BackendError(BackendError::Kind::unreachable, "pipe() failed");
        if (::pipe(from_child) != 0) {
            ::close(to_child[0]);
            ::close(to_child[1]);
            throw BackendError(BackendError::Kind::unreachable, "pipe() failed");
        }
        pid_ = ::fork();
        if (pid_ < 0) throw BackendError(BackendError::Kind::unreachable, "fork() failed");
        if (pid_ == 0) {
            ::dup2(to_child[0], STDIN_FILENO);
            ::dup2(from_child[1], STDOUT_FILENO);
            ::close(to_child[0]);
            ::close(to_child[1]);
            ::close(from_child[0]);
            ::close(from_child[1]);
            ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            ::_exit(127);
        }
        ::close(to_child[0]);
        ::close(from_child[1]);
        write_fd_ = to_child[1];
        read_fd_ = from_child[0];
        ::fcntl(write_fd_, F_SETFD, FD_CLOEXEC);
        ::fcntl(read_fd_, F_SETFD, FD_CLOEXEC);
        reader_ = FdLineReader(read_fd_);
    }

    ~ProcessChannel() override {
        if (write_fd_ >= 0) ::close(write_fd_);
        if (read_fd_ >= 0) ::close(read_fd_);
        if (pid_ > 0) {
            int status = 0;
            for (int i = 0; i < 50; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) != 0) return;
                ::usleep(10000);
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
        }
    }

    void send_line(const std::string& line) override { write_all(write_fd_, line + "\n", describe(), false); }
    std::string receive_line(std::chrono::milliseconds timeout) override { return reader_.read_line(timeout, describe()); }
    [[nodiscard]] std::string describe() const override { return "exec:" + command_; }

private:
    std::string command_;
    pid_t pid_ = -1;
    int write_fd_ = -1;
    int read_fd_ = -1;
    FdLineReader reader_;
};

class TcpChannel final : public LineChannel {
public:
    TcpChannel(const std::string& host, int port) : host_(host), port_(port), reader_(-1) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const std::string service = std::to_string(port);
        if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0 || res == nullptr)
            throw BackendError(BackendError::Kind::unreachable, describe() + ": cannot resolve host");
        for (addrinfo* a = res; a != nullptr; a = a->ai_next) {
            fd_ = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
            if (fd_ < 0) continue;
            if (::connect(fd_, a->ai_addr, a->ai_addrlen) == 0) break;
            ::close(fd_);
            fd_ = -1;
        }
        ::freeaddrinfo(res);
        if (fd_ < 0) throw BackendError(BackendError::Kind::unreachable, describe() + ": connection refused");
        reader_ = FdLineReader(fd_);
    }
    ~TcpChannel() override {
        if (fd_ >= 0) ::close(fd_);
    }

    void send_line(const std::string& line) override { write_all(fd_, line + "\n", describe(), true); }
    std::string receive_line(std::chrono::milliseconds timeout) override { return reader_.read_line(timeout, describe()); }
    [[nodiscard]] std::string describe() const override { return "tcp:" + host_ + ":" + std::to_string(port_); }

private:
    std::string host_;
    int port_;
    int fd_ = -1;
    FdLineReader reader_;
};

}  // namespace

std::unique_ptr<LineChannel> open_process_channel(const std::string& command) {
    return std::make_unique<ProcessChannel>(command);
}

std::unique_ptr<LineChannel> open_tcp_channel(const std::string& host, int port) {
    return std::make_unique<TcpChannel>(host, port);
}

}  // namespace regprompt
