#pragma once

#include <atomic>
#include <cstddef>
#include <memory>

namespace modex {

// Process-wide byte counter for tensor storage. Every Tensor buffer goes
// through CountingAllocator, so current/peak reflect live tensor memory only.
class AllocationCounter {
 public:
  static AllocationCounter& instance() {
    static AllocationCounter counter;
    return counter;
  }

  void on_allocate(std::size_t bytes) {
    const std::size_t now = current_.fetch_add(bytes) + bytes;
    std::size_t peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
  }
  void on_deallocate(std::size_t bytes) { current_.fetch_sub(bytes); }

  std::size_t current() const { return current_.load(); }
  std::size_t peak() const { return peak_.load(); }
  // Restarts peak tracking from the current live size.
  void reset_peak() { peak_.store(current_.load()); }

 private:
  AllocationCounter() = default;
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
};

template <class T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <class U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    AllocationCounter::instance().on_allocate(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    AllocationCounter::instance().on_deallocate(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace modex
