#include <doctest.h>

#include <smim/verify.hpp>

#include "test_util.hpp"

using namespace smim;

TEST_SUITE("verify") {

TEST_CASE("the full verification run passes and covers every suite") {
    auto report = run_verify("all");
    CHECK(report.pass);
    REQUIRE(report.suites.size() == 4);
    const char* expected[] = {"sparse", "grad", "mask", "pipeline"};
    for (size_t i = 0; i < 4; ++i) {
        CAPTURE(report.suites[i].name);
        CHECK(report.suites[i].name == expected[i]);
        CHECK(report.suites[i].pass);
        CHECK(!report.suites[i].checks.empty());
        for (const auto& c : report.suites[i].checks) {
            CAPTURE(c.name);
            CAPTURE(c.detail);
            CHECK(c.pass);
            CHECK(!c.detail.empty());
        }
    }
}

TEST_CASE("suite filters select exactly the named suite") {
    for (const auto& name : verify_suite_names()) {
        auto report = run_verify(name);
        REQUIRE(report.suites.size() == 1);
        CHECK(report.suites[0].name == name);
        CHECK(report.pass);
    }
}

TEST_CASE("an unknown suite name is a usage error") {
    CHECK_THROWS_WITH_AS(run_verify("everything"), doctest::Contains("unknown suite"),
                         UsageError);
    CHECK_THROWS_WITH_AS(run_verify(""), doctest::Contains("unknown suite"), UsageError);
}

TEST_CASE("unlinked masks make the mask suite fail, and only that suite") {
    auto report = run_verify("mask", false);
    CHECK(!report.pass);
    REQUIRE(report.suites.size() == 1);
    CHECK(!report.suites[0].pass);
    REQUIRE(report.suites[0].checks.size() == 1);
    const auto& c = report.suites[0].checks[0];
    CHECK(!c.pass);
    // The detail carries the invariant violation from the consistency check.
    CHECK(c.detail.find("stage") != std::string::npos);

    // The schedule-only suites are unaffected by the mask fixture.
    auto pipeline = run_verify("pipeline", false);
    CHECK(pipeline.pass);
}

TEST_CASE("the JSON report mirrors the in-memory structure") {
    auto report = run_verify("mask");
    auto j = report.to_json();
    CHECK(j.at("pass").get<bool>() == report.pass);
    REQUIRE(j.at("suites").size() == report.suites.size());
    const auto& js = j.at("suites")[0];
    CHECK(js.at("name").get<std::string>() == "mask");
    CHECK(js.at("pass").get<bool>() == report.suites[0].pass);
    REQUIRE(js.at("checks").size() == report.suites[0].checks.size());
    for (size_t i = 0; i < report.suites[0].checks.size(); ++i) {
        CHECK(js.at("checks")[i].at("name").get<std::string>() ==
              report.suites[0].checks[i].name);
        CHECK(js.at("checks")[i].at("pass").get<bool>() == report.suites[0].checks[i].pass);
        CHECK(js.at("checks")[i].at("detail").get<std::string>() ==
              report.suites[0].checks[i].detail);
    }
}

}  // TEST_SUITE
