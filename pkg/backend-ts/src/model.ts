/**
 * Model-side callback surface and the built-in adder.
 *
 * A model owns four value stores, one per variable type, keyed by value
 * reference. Lifecycle callbacks report a Status instead of throwing; the
 * serve loop forwards that status to the proxy verbatim.
 */

import { Status, type WireValue } from "./wire.js";

export type ValueKind = "real" | "integer" | "boolean" | "text";

export interface SdkModel {
  setupExperiment(startTime: number, stopTime: number | null, tolerance: number | null): Status;
  enterInitialization(): Status;
  exitInitialization(): Status;
  doStep(currentTime: number, stepSize: number): Status;
  terminate(): Status;
  setValues(kind: ValueKind, vrs: number[], values: WireValue[]): Status;
  getValues(kind: ValueKind, vrs: number[]): { status: Status; values: WireValue[] };
}

function wrapI32(value: number): number {
  // ToInt32 keeps arithmetic results encodable as a signed 32-bit integer.
  return value | 0;
}

/**
 * Pairwise combiner over the four variable types: reals add, integers
 * subtract (wrapping at 32 bits), booleans conjoin, text concatenates.
 * Value references 0 and 1 of each type are the inputs, 2 is the output.
 * Outputs refresh only inside doStep, never lazily on read.
 */
export class AdderModel implements SdkModel {
  private stores: Record<ValueKind, Map<number, WireValue>> = {
    real: new Map([[0, 0], [1, 0], [2, 0]]),
    integer: new Map([[0, 0], [1, 0], [2, 0]]),
    boolean: new Map([[0, false], [1, false], [2, false]]),
    text: new Map([[0, ""], [1, ""], [2, ""]]),
  };

  setupExperiment(): Status {
    return Status.Ok;
  }

  enterInitialization(): Status {
    return Status.Ok;
  }

  exitInitialization(): Status {
    return Status.Ok;
  }

  doStep(): Status {
    const real = this.stores.real;
    const int = this.stores.integer;
    const bool = this.stores.boolean;
    const text = this.stores.text;
    real.set(2, (real.get(0) as number) + (real.get(1) as number));
    int.set(2, wrapI32((int.get(0) as number) - (int.get(1) as number)));
    bool.set(2, (bool.get(0) as boolean) && (bool.get(1) as boolean));
    text.set(2, (text.get(0) as string) + (text.get(1) as string));
    return Status.Ok;
  }

  terminate(): Status {
    return Status.Ok;
  }

  setValues(kind: ValueKind, vrs: number[], values: WireValue[]): Status {
    const store = this.stores[kind];
    if (vrs.some((vr) => !store.has(vr))) return Status.Error;
    vrs.forEach((vr, i) => store.set(vr, values[i] as WireValue));
    return Status.Ok;
  }

  getValues(kind: ValueKind, vrs: number[]): { status: Status; values: WireValue[] } {
    const store = this.stores[kind];
    if (vrs.some((vr) => !store.has(vr))) return { status: Status.Error, values: [] };
    return { status: Status.Ok, values: vrs.map((vr) => store.get(vr) as WireValue) };
  }
}

export const MODEL_REGISTRY: Record<string, () => SdkModel> = {
  adder: () => new AdderModel(),
};

export function createModel(name: string): SdkModel {
  const factory = MODEL_REGISTRY[name];
  if (factory === undefined) {
    const known = Object.keys(MODEL_REGISTRY).sort().join(", ");
    throw new Error(`unknown model '${name}' (known: ${known})`);
  }
  return factory();
}
