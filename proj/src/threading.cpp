#include "fsm/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace fsm {

namespace {

int g_max_threads = 0;

struct Pool {
    std::mutex mu;
    std::condition_variable cv_work;
    std::condition_variable cv_done;
    std::vector<std::thread> workers;
    std::function<void(int64_t, int64_t)> fn;
    int64_t begin = 0, end = 0, grain = 1;
    std::atomic<int64_t> next{0};
    std::atomic<int> active{0};
    uint64_t generation = 0;
    bool stop = false;

    explicit Pool(int n) {
        for (int i = 0; i < n; ++i) {
            workers.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu);
            stop = true;
        }
        cv_work.notify_all();
        for (auto& t : workers) t.join();
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(mu);
                cv_work.wait(lk, [&] { return stop || generation != seen; });
                if (stop) return;
                seen = generation;
            }
            run_chunks();
            if (active.fetch_sub(1) == 1) {
                std::lock_guard<std::mutex> lk(mu);
                cv_done.notify_all();
            }
        }
    }

    void run_chunks() {
        for (;;) {
            int64_t b = next.fetch_add(grain);
            if (b >= end) break;
            int64_t e = std::min(end, b + grain);
            fn(b, e);
        }
    }

    void run(int64_t b, int64_t e, int64_t g,
             const std::function<void(int64_t, int64_t)>& f) {
        {
            std::lock_guard<std::mutex> lk(mu);
            fn = f;
            begin = b;
            end = e;
            grain = g;
            next.store(b);
            active.store(static_cast<int>(workers.size()));
            ++generation;
        }
        cv_work.notify_all();
        run_chunks();  // caller participates
        std::unique_lock<std::mutex> lk(mu);
        cv_done.wait(lk, [&] { return active.load() == 0; });
    }
};

thread_local bool tl_in_parallel = false;

Pool* pool_instance(int nworkers) {
    static Pool* p = new Pool(nworkers);
    return p;
}

}  // namespace

void set_max_threads(int n) { g_max_threads = n < 0 ? 0 : n; }

int max_threads() {
    if (g_max_threads > 0) return g_max_threads;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(int64_t begin, int64_t end, int64_t min_grain,
                  const std::function<void(int64_t, int64_t)>& fn) {
    if (begin >= end) return;
    int64_t n = end - begin;
    int threads = max_threads();
    if (threads <= 1 || n <= min_grain || tl_in_parallel) {
        fn(begin, end);
        return;
    }
    // pool size is fixed at first parallel use; max_threads() caps how much of
    // it a given run may occupy via the chunk grain
    static const int pool_workers = [] {
        unsigned hw = std::thread::hardware_concurrency();
        return hw <= 1 ? 0 : static_cast<int>(hw) - 1;
    }();
    if (pool_workers == 0) {
        fn(begin, end);
        return;
    }
    int64_t chunks = std::min<int64_t>(threads * 4, (n + min_grain - 1) / min_grain);
    int64_t grain = (n + chunks - 1) / chunks;
    tl_in_parallel = true;
    pool_instance(pool_workers)->run(begin, end, grain, fn);
    tl_in_parallel = false;
}

}  // namespace fsm
