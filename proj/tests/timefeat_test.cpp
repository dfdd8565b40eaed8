#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "evseq/timefeat.hpp"
#include "evseq/common.hpp"

using namespace evseq;

TEST_CASE("soft log time: pinned values") {
    CHECK(soft_log_time(0.0) == 0.0);
    // 8*ln(2) and 8*ln(10801), evaluated independently at high precision
    CHECK(soft_log_time(8.0) == doctest::Approx(5.545177444479562).epsilon(1e-12));
    CHECK(soft_log_time(86400.0) == doctest::Approx(74.299152011347786).epsilon(1e-10));
    CHECK_THROWS_AS(soft_log_time(-1.0), InvariantError);
}

TEST_CASE("soft log time: strictly increasing, ~linear for small t") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        double x = rng.uniform(0.0, 1e9);
        double y = rng.uniform(0.0, 1e9);
        if (x == y) continue;
        if (x > y) std::swap(x, y);
        CHECK(soft_log_time(x) < soft_log_time(y));
    }
    CHECK(soft_log_time(0.01) == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("calendar: cycle origins and half periods") {
    // 2024-01-01 was a Monday.
    int64_t monday = 1704067200;
    auto a = calendar_features(monday);
    CHECK(a.hour == doctest::Approx(0.0));
    CHECK(a.dow == doctest::Approx(0.0));
    CHECK(a.dom == doctest::Approx(0.0));

    auto noon = calendar_features(monday + 12 * 3600);
    CHECK(noon.hour == doctest::Approx(kPi).epsilon(1e-12));

    // day-of-month 16 of any month -> 2*pi*15/31
    auto d16 = calendar_features(monday + 15 * 86400 + 7 * 3600);
    CHECK(d16.dom == doctest::Approx(kTwoPi * 15.0 / 31.0).epsilon(1e-12));
}

TEST_CASE("calendar: periodicity at exact cycles") {
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        int64_t t = 1500000000 + static_cast<int64_t>(rng.uniform_u64(200000000ULL));
        auto a = calendar_features(t);
        auto day = calendar_features(t + 86400);
        CHECK(std::abs(a.hour - day.hour) < 1e-9);
        auto week = calendar_features(t + 7 * 86400);
        CHECK(std::abs(a.dow - week.dow) < 1e-9);
        CHECK(std::abs(a.hour - week.hour) < 1e-9);
    }
}

TEST_CASE("calendar: weekday sweep") {
    int64_t monday = 1704067200;
    for (int d = 0; d < 7; ++d) {
        auto a = calendar_features(monday + static_cast<int64_t>(d) * 86400 + 3600);
        CHECK(a.dow == doctest::Approx(kTwoPi * d / 7.0).epsilon(1e-12));
    }
}
