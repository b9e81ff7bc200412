import { describe, expect, it } from "vitest";

import { AdderModel, createModel } from "../src/model.js";
import { Status } from "../src/wire.js";

function steppedAdder(
  inputs: Partial<Record<"real" | "integer" | "boolean" | "text", [unknown, unknown]>>,
): AdderModel {
  const model = new AdderModel();
  for (const [kind, pair] of Object.entries(inputs)) {
    expect(model.setValues(kind as never, [0, 1], pair as never)).toBe(Status.Ok);
  }
  expect(model.doStep(0, 0.01)).toBe(Status.Ok);
  return model;
}

describe("adder arithmetic", () => {
  it("adds reals", () => {
    const model = steppedAdder({ real: [1.0, 2.0] });
    expect(model.getValues("real", [2])).toEqual({ status: Status.Ok, values: [3.0] });
  });

  it("real addition is plain binary64 addition", () => {
    const model = steppedAdder({ real: [0.1, 0.2] });
    expect(model.getValues("real", [2]).values[0]).toBe(0.30000000000000004);
  });

  it("subtracts integers", () => {
    const model = steppedAdder({ integer: [5, 7] });
    expect(model.getValues("integer", [2]).values[0]).toBe(-2);
  });

  it.each([
    [-(2 ** 31), 1, 2 ** 31 - 1],
    [2 ** 31 - 1, -1, -(2 ** 31)],
    [-(2 ** 31), 2 ** 31 - 1, 1],
  ])("integer result wraps at 32 bits: %d - %d = %d", (a, b, expected) => {
    const model = steppedAdder({ integer: [a, b] });
    expect(model.getValues("integer", [2]).values[0]).toBe(expected);
  });

  it.each([
    [false, false, false],
    [false, true, false],
    [true, false, false],
    [true, true, true],
  ])("booleans conjoin: %s AND %s = %s", (a, b, expected) => {
    const model = steppedAdder({ boolean: [a, b] });
    expect(model.getValues("boolean", [2]).values[0]).toBe(expected);
  });

  it("text concatenates", () => {
    const model = steppedAdder({ text: ["foo", "bar"] });
    expect(model.getValues("text", [2]).values[0]).toBe("foobar");
  });

  it("outputs refresh only inside doStep", () => {
    const model = new AdderModel();
    model.setValues("real", [0, 1], [4.0, 5.0]);
    expect(model.getValues("real", [2]).values[0]).toBe(0);
    model.doStep(0, 0.01);
    expect(model.getValues("real", [2]).values[0]).toBe(9.0);
    model.setValues("real", [0], [100.0]);
    expect(model.getValues("real", [2]).values[0]).toBe(9.0);
  });
});

describe("value store contract", () => {
  it("starts at type defaults", () => {
    const model = new AdderModel();
    expect(model.getValues("real", [0, 1, 2]).values).toEqual([0, 0, 0]);
    expect(model.getValues("integer", [0, 1, 2]).values).toEqual([0, 0, 0]);
    expect(model.getValues("boolean", [0, 1, 2]).values).toEqual([false, false, false]);
    expect(model.getValues("text", [0, 1, 2]).values).toEqual(["", "", ""]);
  });

  it("set with any unknown reference writes nothing", () => {
    const model = new AdderModel();
    expect(model.setValues("real", [0, 17], [1.0, 2.0])).toBe(Status.Error);
    expect(model.getValues("real", [0]).values[0]).toBe(0);
  });

  it("get with any unknown reference returns an error and no values", () => {
    const model = new AdderModel();
    expect(model.getValues("integer", [0, 99])).toEqual({ status: Status.Error, values: [] });
  });

  it("lifecycle callbacks all succeed", () => {
    const model = new AdderModel();
    expect(model.setupExperiment()).toBe(Status.Ok);
    expect(model.enterInitialization()).toBe(Status.Ok);
    expect(model.exitInitialization()).toBe(Status.Ok);
    expect(model.terminate()).toBe(Status.Ok);
  });
});

describe("model registry", () => {
  it("creates fresh adder instances", () => {
    const first = createModel("adder");
    const second = createModel("adder");
    expect(first).not.toBe(second);
    first.setValues("real", [0], [7.0]);
    expect(second.getValues("real", [0]).values[0]).toBe(0);
  });

  it("rejects unknown model names", () => {
    expect(() => createModel("nonesuch")).toThrow(/unknown model 'nonesuch'/);
  });
});
