#pragma once
// Temporal encodings: the soft-log transform applied to elapsed seconds and
// the calendar angles (hour of day, day of week, day of month) attached to
// event-history entries. All timestamps are epoch seconds, UTC.

#include "evseq/common.hpp"

#include <cmath>
#include <cstdint>

namespace evseq {

// 8*ln(1+t/8): ~linear for small t, logarithmic for life-long horizons.
inline double soft_log_time(double seconds) {
    if (!(seconds >= 0.0)) throw InvariantError("soft_log_time: negative or non-finite input");
    return 8.0 * std::log1p(seconds / 8.0);
}

struct CalendarAngles {
    double hour;  // [0, 2pi), fractional within the day
    double dow;   // [0, 2pi), integer weekday, Monday = 0
    double dom;   // [0, 2pi), integer day of month, period fixed at 31
};

namespace detail {

// Howard Hinnant's civil-from-days; enough calendar for day-of-month.
inline void civil_from_days(int64_t z, int& year, unsigned& month, unsigned& day) {
    z += 719468;
    const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int64_t y = static_cast<int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    day = doy - (153 * mp + 2) / 5 + 1;
    month = mp < 10 ? mp + 3 : mp - 9;
    year = static_cast<int>(y + (month <= 2));
}

inline int64_t days_from_civil(int year, unsigned month, unsigned day) {
    year -= month <= 2;
    const int64_t era = (year >= 0 ? year : year - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(year - era * 400);
    const unsigned doy = (153 * (month > 2 ? month - 3 : month + 9) + 2) / 5 + day - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

} // namespace detail

// "YYYY-MM-DD" (UTC midnight) -> epoch seconds
inline int64_t parse_date(const std::string& s) {
    int y = 0;
    unsigned m = 0, d = 0;
    if (sscanf(s.c_str(), "%d-%u-%u", &y, &m, &d) != 3 || m < 1 || m > 12 || d < 1 || d > 31)
        throw ConfigError("bad date (want YYYY-MM-DD): " + s);
    return detail::days_from_civil(y, m, d) * 86400;
}

inline CalendarAngles calendar_features(int64_t epoch_seconds) {
    int64_t days = epoch_seconds / 86400;
    int64_t sec_of_day = epoch_seconds % 86400;
    if (sec_of_day < 0) {
        sec_of_day += 86400;
        days -= 1;
    }

    // 1970-01-01 was a Thursday; Monday = 0.
    int weekday = static_cast<int>((days + 3) % 7);
    if (weekday < 0) weekday += 7;

    int year;
    unsigned month, day;
    detail::civil_from_days(days, year, month, day);

    CalendarAngles a;
    a.hour = kTwoPi * static_cast<double>(sec_of_day) / 86400.0;
    a.dow = kTwoPi * static_cast<double>(weekday) / 7.0;
    a.dom = kTwoPi * static_cast<double>(day - 1) / 31.0;
    return a;
}

} // namespace evseq
