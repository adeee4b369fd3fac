#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace capsdec {

// Worker count: min(hardware_concurrency, CAPSDEC_THREADS). At least 1.
inline int thread_count() {
    static const int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (const char* env = std::getenv("CAPSDEC_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return n;
}

namespace detail {

// Persistent pool running one closure over [begin,end) split in contiguous
// chunks. Each index is processed by exactly one worker, so results are
// bitwise independent of the thread count as long as the closure writes
// only to locations owned by its index.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(thread_count());
        return pool;
    }

    void run(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& body) {
        const int64_t n = end - begin;
        if (n <= 0) return;
        const int workers = static_cast<int>(std::min<int64_t>(threads_.size() + 1, n));
        if (workers <= 1) {
            body(begin, end);
            return;
        }
        std::unique_lock<std::mutex> lock(mutex_);
        body_ = &body;
        chunk_begin_ = begin;
        chunk_end_ = end;
        chunk_count_ = workers;
        next_chunk_ = 1;  // chunk 0 runs on the calling thread
        pending_ = workers - 1;
        ++generation_;
        lock.unlock();
        wake_.notify_all();

        run_chunk(0);

        lock.lock();
        done_.wait(lock, [&] { return pending_ == 0; });
        body_ = nullptr;
    }

private:
    explicit ThreadPool(int n) {
        for (int i = 1; i < n; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run_chunk(int chunk) {
        const int64_t n = chunk_end_ - chunk_begin_;
        const int64_t lo = chunk_begin_ + n * chunk / chunk_count_;
        const int64_t hi = chunk_begin_ + n * (chunk + 1) / chunk_count_;
        if (lo < hi) (*body_)(lo, hi);
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            int chunk;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                wake_.wait(lock, [&] { return stop_ || (body_ && generation_ != seen && next_chunk_ < chunk_count_); });
                if (stop_) return;
                seen = generation_;
                chunk = next_chunk_++;
            }
            run_chunk(chunk);
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (--pending_ == 0) done_.notify_one();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_, done_;
    const std::function<void(int64_t, int64_t)>* body_ = nullptr;
    int64_t chunk_begin_ = 0, chunk_end_ = 0;
    int chunk_count_ = 0, next_chunk_ = 0, pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace detail

// Deterministic parallel loop: body(lo, hi) over disjoint ranges.
inline void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& body) {
    detail::ThreadPool::instance().run(begin, end, body);
}

}  // namespace capsdec
